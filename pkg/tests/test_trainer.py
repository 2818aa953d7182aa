"""
Tests for the training loop, method dispatch, checkpoints and evaluation.

Covers:
- ERM matches a hand-written Adam loop bit for bit
- a pinned all-ones mask with λ = 0 reduces diffIRM to ERM
- resuming from a checkpoint reproduces an uninterrupted run
- every method trains a few iterations without error
- the penalty gradient reaches θ only; diffAug evaluates no penalty
- a bank lagging the shared predictor is flagged stale
- divergence and config-hash mismatch surface as typed errors
"""
import json
import logging
from unittest.mock import patch

import numpy as np
import pytest

from diffirm.core.gradcheck import fresh_params
from diffirm.core.optim import AdamState, adam_step, clip_global_norm
from diffirm.core.tensor import Tensor, backward, mse_loss
from diffirm.errors import ConfigError, DivergenceError
from diffirm.models.config import METHODS, TrainConfig
from diffirm.objectives import EnvPredictorBank
from diffirm.predictors import init_params, predict
from diffirm.trainer import (
    Trainer,
    batch_indices,
    env_segments,
    evaluate,
    load_checkpoint,
    train,
    train_variant_dispatch,
)


def _assert_params_equal(a, b):
    assert a.keys() == b.keys()
    for k in a:
        np.testing.assert_array_equal(a[k].data, b[k].data)


# =============================================
# BATCHING
# =============================================

def test_batch_indices_cover_each_epoch():
    """Consecutive batches walk a permutation, so one epoch sees every window once."""
    seen = np.concatenate([batch_indices(12, 4, seed=0, iteration=t) for t in range(3)])
    assert sorted(seen.tolist()) == list(range(12))
    np.testing.assert_array_equal(batch_indices(12, 4, 0, 5), batch_indices(12, 4, 0, 5))


def test_batch_larger_than_dataset():
    """The batch is capped at the number of windows."""
    assert len(batch_indices(3, 10, 0, 0)) == 3


def test_env_segments_are_contiguous():
    """Segments partition the index range in order."""
    parts = env_segments(10, 3)
    assert [p.tolist() for p in parts] == [[0, 1, 2, 3], [4, 5, 6], [7, 8, 9]]


# =============================================
# REDUCTIONS TO ERM
# =============================================

def test_erm_matches_hand_written_loop(train_data, fast_config):
    """The ERM path is plain mini-batch Adam on the MSE."""
    cfg = fast_config("erm")
    result = train(cfg, train_data)

    spec = Trainer(cfg, train_data).spec
    x_all, y_all = train_data.train.x, train_data.train.y
    theta = init_params(spec, cfg.seed)
    state = AdamState.zeros(theta, lr=cfg.lr.theta)
    for t in range(cfg.iterations):
        idx = batch_indices(len(x_all), cfg.batch_size, cfg.seed, t)
        leaves = fresh_params(theta)
        loss = mse_loss(predict(spec, leaves, x_all[idx], train_data.a_hat), y_all[idx])
        backward(loss)
        grads, _ = clip_global_norm({k: p.grad for k, p in leaves.items()}, cfg.clip_norm)
        theta = adam_step(theta, grads, state)

    _assert_params_equal(result.theta, theta)


def test_full_mask_without_penalty_reduces_to_erm(train_data, fast_config):
    """With M pinned to 1 every augmented input is X, so θ follows the ERM trajectory bit for bit."""
    erm = train(fast_config("erm"), train_data)
    pinned = train(fast_config("diffirm", force_mask=1.0, lam=0.0, k_envs=5), train_data)
    assert pinned.plan.fixed_mask == 1.0 and pinned.plan.penalty_mode is None
    _assert_params_equal(pinned.theta, erm.theta)


# =============================================
# DISPATCH
# =============================================

def test_unknown_method_is_config_error():
    """Methods outside the registry are rejected by the dispatcher."""
    with pytest.raises(ConfigError):
        train_variant_dispatch(TrainConfig.model_construct(method="sgd"))


def test_dispatch_plans():
    """Each ablation switches off the expected parts."""
    minus = train_variant_dispatch(TrainConfig(method="diffirm_minus"))
    assert minus.fixed_mask == 0.0 and not minus.learn_mask and minus.lam > 0

    diffaug = train_variant_dispatch(TrainConfig(method="diffaug"))
    assert diffaug.lam == 0.0 and diffaug.learn_mask and diffaug.augmentor == "diffusion"

    advaug = train_variant_dispatch(TrainConfig(method="advaug"))
    assert advaug.augmentor == "perturbation" and advaug.lam == 0.0

    ar = train_variant_dispatch(TrainConfig(method="erm_ar", target_channel=1))
    assert ar.baseline and ar.channels == (1,)


def test_diffirm_minus_learns_no_mask(train_data, fast_config):
    """The constant-mask ablation has no φ parameters and no mask net."""
    result = train(fast_config("diffirm_minus", iterations=2), train_data)
    assert result.state.phi == {}
    assert result.mask_net is None
    assert result.denoiser is not None


def test_erm_ar_reads_only_the_target_channel(train_data, fast_config):
    """The autoregressive baseline sees one channel."""
    result = train(fast_config("erm_ar", iterations=2), train_data)
    assert result.spec.n_features == 1
    assert result.windows(train_data.test).x.shape[-1] == 1


@pytest.mark.parametrize("method", METHODS)
def test_every_method_trains(train_data, fast_config, method):
    """A few iterations of every method produce finite, evaluated history."""
    result = train(fast_config(method, iterations=4), train_data)
    assert result.state.iteration == 4
    assert [r.iteration for r in result.history] == [1, 3]
    assert all(np.isfinite(r.total) for r in result.history)
    assert all(r.val_mae is not None for r in result.history)


def test_exact_penalty_mode_trains(train_data, fast_config):
    """The bank-based penalty refreshes; a bank is flagged stale exactly when the penalty is negative."""
    result = train(fast_config("diffirm", penalty_mode="exact", iterations=4), train_data)
    assert result.state.bank is not None and result.state.bank.last_refresh >= 0
    assert all(r.bank_stale == (r.penalty < 0.0) for r in result.history)


def test_lagging_bank_is_flagged(train_data, fast_config, caplog):
    """Bank predictors far from their own environment's optimum are reported as stale."""
    trainer = Trainer(fast_config("diffirm", penalty_mode="exact"), train_data)
    state = trainer.init_state()
    state.bank.thetas = [
        {k: Tensor(p.data + 3.0, requires_grad=True) for k, p in theta_k.items()} for theta_k in state.bank.thetas
    ]
    with patch.object(EnvPredictorBank, "refresh"), caplog.at_level(logging.WARNING, logger="diffirm.trainer"):
        report = trainer.step(state)
    assert report.penalty < 0.0 and report.bank_stale
    assert "lags the shared predictor" in caplog.text


def _huge_penalty(spec, theta, *args, **kwargs):
    return 1.0, {k: np.full_like(p.data, 1e3) for k, p in theta.items()}


def test_penalty_gradient_reaches_theta_only(train_data, fast_config):
    """Swapping in a huge penalty gradient moves θ but leaves φ and ψ exactly where they were."""
    cfg = fast_config("diffirm", penalty_mode="firstorder", warmup_fraction=0.0)
    plain_trainer = Trainer(cfg, train_data)
    plain = plain_trainer.init_state()
    plain_trainer.step(plain)

    trainer = Trainer(cfg, train_data)
    state = trainer.init_state()
    with patch("diffirm.trainer.invariance_penalty_firstorder", side_effect=_huge_penalty) as penalty:
        report = trainer.step(state)
    assert penalty.called and report.penalty == 1.0

    _assert_params_equal(state.phi, plain.phi)
    _assert_params_equal(state.psi, plain.psi)
    assert any(not np.array_equal(state.theta[k].data, plain.theta[k].data) for k in state.theta)


def test_diffaug_computes_no_penalty(train_data, fast_config):
    """The augmentation-only ablation never evaluates an invariance penalty."""
    trainer = Trainer(fast_config("diffaug", warmup_fraction=0.0), train_data)
    state = trainer.init_state()
    with patch("diffirm.trainer.invariance_penalty_firstorder") as first, \
            patch("diffirm.trainer.invariance_penalty_exact") as exact:
        report = trainer.step(state)
    assert not first.called and not exact.called
    assert report.penalty == 0.0


def test_warmup_ramps_lambda(train_data, fast_config):
    """λ rises linearly over the warm-up fraction, then holds."""
    trainer = Trainer(fast_config("diffirm", iterations=10, warmup_fraction=0.5, lam=2.0), train_data)
    assert trainer.lam_at(0) == pytest.approx(0.4)
    assert trainer.lam_at(4) == pytest.approx(2.0)
    assert trainer.lam_at(9) == 2.0


def test_divergence_raises_with_diagnostics(train_data, fast_config):
    """A loss above the threshold stops the run."""
    with pytest.raises(DivergenceError) as exc:
        train(fast_config("erm", divergence_threshold=1e-12), train_data)
    assert exc.value.diagnostics["iteration"] == 0


# =============================================
# CHECKPOINTS AND EVALUATION
# =============================================

def test_resume_matches_uninterrupted_run(train_data, fast_config, tmp_path):
    """Stopping after 3 iterations and resuming gives the same parameters as one run of 6."""
    cfg = fast_config("diffirm", iterations=6)
    full = train(cfg, train_data)

    first = tmp_path / "first"
    partial = train(cfg, train_data, output_dir=first, iterations_limit=3)
    assert partial.state.iteration == 3
    resumed = train(cfg, train_data, output_dir=tmp_path / "second", resume=first / "last.npz")

    assert resumed.state.iteration == 6
    _assert_params_equal(resumed.theta, full.theta)
    _assert_params_equal(resumed.state.phi, full.state.phi)
    _assert_params_equal(resumed.state.psi, full.state.psi)
    assert [r.total for r in resumed.history] == [r.total for r in full.history]


def test_checkpoint_files(train_data, fast_config, tmp_path):
    """A run writes best/last checkpoints and a JSON-lines history tagged with the config hash."""
    cfg = fast_config("erm")
    train(cfg, train_data, output_dir=tmp_path)
    arrays, meta = load_checkpoint(tmp_path / "last.npz")
    assert meta["iteration"] == cfg.iterations
    assert "theta.head.w" in arrays
    assert (tmp_path / "best.npz").exists()
    lines = [json.loads(line) for line in (tmp_path / "history.jsonl").read_text().splitlines()]
    assert len(lines) == 3
    assert {line["config_hash"] for line in lines} == {meta["config_hash"]}


def test_resume_with_other_config_rejected(train_data, fast_config, tmp_path):
    """A checkpoint only resumes the config that wrote it."""
    train(fast_config("erm"), train_data, output_dir=tmp_path)
    with pytest.raises(ConfigError):
        train(fast_config("erm", seed=99), train_data, resume=tmp_path / "last.npz")


def test_evaluate_reports_every_horizon(train_data, fast_config):
    """One metrics row per horizon step, in original units."""
    result = train(fast_config("erm"), train_data)
    report = evaluate(result.spec, result.best_theta, train_data.test, train_data.a_hat, train_data.scaler,
                      method="erm", seed=3, config_hash="abc")
    assert len(report.per_horizon) == 2
    assert report.final == report.per_horizon[-1]
    assert report.average.mae == pytest.approx(np.mean([m.mae for m in report.per_horizon]))
