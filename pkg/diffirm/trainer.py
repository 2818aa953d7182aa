"""
The diffIRM training loop, its ablation variants and the baselines.

Per batch the augmented methods run one forward pass of

    J = L_aug(θ, ψ, φ) + w · L_reg(φ)

and read three gradients off it: θ and φ descend on J, ψ ascends on L_aug
(plus its own denoising objective). The invariance penalty only adds to θ's
gradient, computed on detached augmented inputs. All groups are updated from
the same pre-batch snapshot and swapped in together.

Randomness is derived from (seed, stream, iteration, ...) rather than carried
as generator state, so a checkpoint only has to store the iteration counter to
replay the rest of a run exactly.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from diffirm.augment.diffusion import DenoiserNet, denoising_loss, sample_environment, schedule_from_config
from diffirm.augment.mask import CausalMaskNet, constant_mask, generate_mask, ratio_regularizer
from diffirm.augment.perturb import PerturbationNet, perturb
from diffirm.core.gradcheck import fresh_params
from diffirm.core.optim import AdamState, adam_step, clip_global_norm
from diffirm.core.tensor import Tensor, backward, mse_loss, reduce_mean, scale, stack
from diffirm.dataset import StDataset, Standardizer, WindowSet, standardize_for_training
from diffirm.errors import ConfigError, ContractError, DivergenceError, NonFiniteError
from diffirm.graph import normalize_adjacency
from diffirm.models.config import METHODS, PredictorSpec, SplitSpec, TrainConfig, config_hash
from diffirm.models.reports import LossReport, Metrics, MetricsReport
from diffirm.objectives import (
    EnvPredictorBank,
    augmented_inputs,
    baseline_loss,
    env_one_hot,
    env_risk_fns,
    environment_risks,
    invariance_penalty_exact,
    invariance_penalty_firstorder,
    mean_risk,
    metrics,
    total_loss,
)
from diffirm.predictors import init_params, predict

logger = logging.getLogger("diffirm.trainer")

Params = dict[str, Tensor]

AUGMENTED = ("diffirm", "advaug", "diffaug", "diffirm_minus")
BASELINES = ("erm", "erm_ar", "irmv1", "rex", "invrat")

# RNG streams
_BATCH, _ENV, _DENOISE, _INIT = 1, 3, 4, 5


# =============================================
# DATA AND VARIANTS
# =============================================

@dataclass(frozen=True)
class TrainData:
    """Split windows plus everything needed to map predictions back to units."""

    train: WindowSet
    val: WindowSet
    test: WindowSet
    a_hat: Tensor
    scaler: Standardizer
    feature_names: tuple[str, ...]
    causal_channels: tuple[int, ...] = ()
    node_ids: tuple[str, ...] = ()

    @classmethod
    def from_dataset(cls, ds: StDataset, split: SplitSpec = SplitSpec(), standardize: bool = True) -> TrainData:
        (train, val, test), scaler = standardize_for_training(ds, split, standardize)
        return cls(train, val, test, normalize_adjacency(ds.graph), scaler,
                   ds.feature_names, ds.causal_channels, ds.graph.node_ids)

    @property
    def n_nodes(self) -> int:
        return self.train.x.shape[1]

    @property
    def tau(self) -> int:
        return self.train.x.shape[2]

    @property
    def n_features(self) -> int:
        return self.train.x.shape[3]

    @property
    def horizon(self) -> int:
        return self.train.y.shape[2]


@dataclass(frozen=True)
class VariantPlan:
    """Which sub-losses and parameter groups a method activates."""

    method: str
    augmentor: Literal["diffusion", "perturbation"] | None
    learn_mask: bool
    fixed_mask: float | None
    lam: float
    penalty_mode: Literal["firstorder", "exact"] | None
    channels: tuple[int, ...] | None = None

    @property
    def baseline(self) -> bool:
        return self.augmentor is None


def train_variant_dispatch(config: TrainConfig) -> VariantPlan:
    method = config.method
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")

    if method in AUGMENTED:
        augmentor = "perturbation" if method == "advaug" else "diffusion"
        fixed = 0.0 if method == "diffirm_minus" else config.force_mask
        lam = 0.0 if method in ("advaug", "diffaug") else config.lam
        return VariantPlan(
            method=method, augmentor=augmentor, learn_mask=fixed is None, fixed_mask=fixed,
            lam=lam, penalty_mode=config.penalty_mode if lam > 0 else None,
        )

    lam = 0.0 if method in ("erm", "erm_ar") else config.lam
    channels = (config.target_channel,) if method == "erm_ar" else None
    return VariantPlan(method=method, augmentor=None, learn_mask=False, fixed_mask=None,
                       lam=lam, penalty_mode=None, channels=channels)


def predictor_spec(config: TrainConfig, data: TrainData, plan: VariantPlan) -> PredictorSpec:
    n_features = len(plan.channels) if plan.channels else data.n_features
    return config.predictor.model_copy(update={
        "n_nodes": data.n_nodes, "tau": data.tau, "horizon": data.horizon, "n_features": n_features,
    })


def sub_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, stream]).generate_state(1)[0])


def batch_indices(n_windows: int, batch_size: int, seed: int, iteration: int, stream: int = 0) -> np.ndarray:
    """Window indices of batch `iteration`: consecutive slices of per-epoch permutations."""
    if n_windows < 1:
        raise ContractError("cannot draw a batch from an empty window set")
    m = min(batch_size, n_windows)
    positions = np.arange(iteration * m, iteration * m + m)
    epochs = positions // n_windows
    out = np.empty(m, dtype=np.int64)
    for epoch in np.unique(epochs):
        perm = np.random.default_rng([seed, _BATCH, stream, int(epoch)]).permutation(n_windows)
        sel = epochs == epoch
        out[sel] = perm[positions[sel] % n_windows]
    return out


def env_segments(n_windows: int, n_envs: int) -> list[np.ndarray]:
    """Contiguous temporal segments of the training windows, one per environment."""
    if n_envs > n_windows:
        raise ContractError(f"{n_envs} environments from {n_windows} windows")
    return np.array_split(np.arange(n_windows), n_envs)


# =============================================
# STATE AND CHECKPOINTS
# =============================================

@dataclass
class TrainState:
    iteration: int
    theta: Params
    phi: Params = field(default_factory=dict)
    psi: Params = field(default_factory=dict)
    eta: Params = field(default_factory=dict)
    opts: dict[str, AdamState] = field(default_factory=dict)
    bank: EnvPredictorBank | None = None
    best_val: float = math.inf
    best_iteration: int = -1
    history: list[LossReport] = field(default_factory=list)

    def groups(self) -> dict[str, Params]:
        return {"theta": self.theta, "phi": self.phi, "psi": self.psi, "eta": self.eta}

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"iteration": np.array(self.iteration)}
        for group, params in self.groups().items():
            out.update({f"{group}.{name}": p.data for name, p in params.items()})
        for group, state in self.opts.items():
            out.update(state.arrays(f"opt.{group}"))
        if self.bank is not None:
            out.update(self.bank.arrays())
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.iteration = int(arrays["iteration"])
        for group, params in self.groups().items():
            for name in list(params):
                params[name] = Tensor(arrays[f"{group}.{name}"], requires_grad=True)
        for group, state in self.opts.items():
            state.load_arrays(f"opt.{group}", arrays)
        if self.bank is not None:
            self.bank.load_arrays(arrays)


def save_checkpoint(path: Path, state: TrainState, config: TrainConfig) -> Path:
    meta = {
        "config_hash": config_hash(config),
        "seed": config.seed,
        "method": config.method,
        "iteration": state.iteration,
        "best_val": None if math.isinf(state.best_val) else state.best_val,
        "best_iteration": state.best_iteration,
        "history": [r.model_dump(mode="json") for r in state.history],
        "config": config.model_dump(mode="json"),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), **state.arrays())
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as npz:
        arrays = {k: np.array(npz[k]) for k in npz.files}
    meta = json.loads(str(arrays.pop("meta")))
    return arrays, meta


def write_history(path: Path, history: list[LossReport], config: TrainConfig) -> None:
    digest = config_hash(config)
    lines = [
        json.dumps({"config_hash": digest, "seed": config.seed, **r.model_dump(mode="json")}, sort_keys=True)
        for r in history
    ]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(line + "\n" for line in lines))


# =============================================
# TRAINER
# =============================================

@dataclass
class TrainResult:
    config: TrainConfig
    plan: VariantPlan
    spec: PredictorSpec
    state: TrainState
    best_theta: Params
    mask_net: CausalMaskNet | None = None
    denoiser: DenoiserNet | None = None

    @property
    def theta(self) -> Params:
        return self.state.theta

    @property
    def history(self) -> list[LossReport]:
        return self.state.history

    def windows(self, split: WindowSet) -> WindowSet:
        return split.select_channels(self.plan.channels) if self.plan.channels else split


class Trainer:
    """Holds the fixed parts of a run; `run` advances a TrainState."""

    def __init__(self, config: TrainConfig, data: TrainData):
        self.config = config
        self.data = data
        self.plan = train_variant_dispatch(config)
        self.spec = predictor_spec(config, data, self.plan)
        self.hash = config_hash(config)
        self.a_hat = data.a_hat
        self.train_windows = self.select_windows(data.train)
        self.val_windows = self.select_windows(data.val)
        if len(self.train_windows) == 0:
            raise ContractError("training split is empty")

        tau, f = self.spec.tau, self.spec.n_features
        self.mask_net = CausalMaskNet(tau, f, config.mask_hidden) if self.plan.learn_mask else None
        self.schedule = schedule_from_config(config.diffusion) if self.plan.augmentor == "diffusion" else None
        if self.plan.augmentor == "diffusion":
            self.augmentor = DenoiserNet(tau, f, config.diffusion.d_emb, config.diffusion.hidden)
        elif self.plan.augmentor == "perturbation":
            self.augmentor = PerturbationNet(tau, f, config.diffusion.hidden)
        else:
            self.augmentor = None
        self.eta_spec = self.spec.model_copy(update={"n_features": f + config.n_envs})
        self.segments = (
            env_segments(len(self.train_windows), config.n_envs)
            if self.plan.method in ("irmv1", "rex", "invrat") else None
        )

    def select_windows(self, windows: WindowSet) -> WindowSet:
        return windows.select_channels(self.plan.channels) if self.plan.channels else windows

    # ---------- state ----------

    def init_state(self) -> TrainState:
        cfg, plan = self.config, self.plan
        theta = init_params(self.spec, cfg.seed)
        state = TrainState(iteration=0, theta=theta)
        state.opts["theta"] = AdamState.zeros(theta, lr=cfg.lr.theta)
        if plan.learn_mask:
            state.phi = CausalMaskNet.init(self.spec.tau, self.spec.n_features, cfg.mask_hidden,
                                           sub_seed(cfg.seed, _INIT)).params
            state.opts["phi"] = AdamState.zeros(state.phi, lr=cfg.lr.phi)
        if self.augmentor is not None:
            state.psi = type(self.augmentor).init(
                self.spec.tau, self.spec.n_features, *self._augmentor_dims(), seed=sub_seed(cfg.seed, _INIT + 1),
            ).params
            state.opts["psi"] = AdamState.zeros(state.psi, lr=cfg.lr.psi)
        if plan.method == "invrat":
            state.eta = init_params(self.eta_spec, sub_seed(cfg.seed, _INIT + 2))
            state.opts["eta"] = AdamState.zeros(state.eta, lr=cfg.lr.eta)
        if plan.penalty_mode == "exact":
            state.bank = EnvPredictorBank.from_theta(theta, cfg.k_envs, lr=cfg.lr.theta)
        return state

    def _augmentor_dims(self) -> tuple[int, ...]:
        d = self.config.diffusion
        return (d.d_emb, d.hidden) if self.plan.augmentor == "diffusion" else (d.hidden,)

    def lam_at(self, iteration: int) -> float:
        if self.plan.lam == 0.0:
            return 0.0
        ramp = self.config.warmup_fraction * self.config.iterations
        if ramp <= 0:
            return self.plan.lam
        return self.plan.lam * min(1.0, (iteration + 1) / ramp)

    # ---------- one batch ----------

    def _augmented_step(self, state: TrainState, t: int) -> tuple[dict[str, dict], LossReport]:
        cfg, plan = self.config, self.plan
        idx = batch_indices(len(self.train_windows), cfg.batch_size, cfg.seed, t)
        x, y = self.train_windows.x[idx], self.train_windows.y[idx]

        theta = fresh_params(state.theta)
        phi = fresh_params(state.phi)
        psi = fresh_params(state.psi)

        if plan.learn_mask:
            m_cau = generate_mask(self.mask_net.with_params(phi), x)
        else:
            m_cau = constant_mask(x.shape, plan.fixed_mask)

        env_rngs = [np.random.default_rng([cfg.seed, _ENV, t, k]) for k in range(cfg.k_envs)]
        augmentor = self.augmentor.with_params(psi)
        if plan.augmentor == "diffusion":
            l_aug = cfg.diffusion.augment_depth
            x_hats = [sample_environment(x, self.a_hat, augmentor, self.schedule, l_aug, r) for r in env_rngs]
        else:
            x_hats = [perturb(augmentor, x, r) for r in env_rngs]

        x_tildes = augmented_inputs(x, x_hats, m_cau)
        risks = environment_risks(self.spec, theta, x_tildes, y, self.a_hat)
        l_aug_t = mean_risk(risks, x_tildes)
        objective = l_aug_t
        reg_value = 0.0
        if plan.learn_mask:
            reg = ratio_regularizer(m_cau, cfg.ratio_alpha)
            reg_value = reg.item()
            objective = l_aug_t + scale(reg, cfg.ratio_weight)
        backward(objective)

        grads = {
            "theta": {k: p.grad.copy() for k, p in theta.items()},
            "phi": {k: p.grad.copy() for k, p in phi.items()},
            "psi": {k: -cfg.diffusion.eta_adv * p.grad for k, p in psi.items()},
        }
        if plan.augmentor == "diffusion" and cfg.diffusion.denoise_weight > 0:
            psi_dn = fresh_params(state.psi)
            dn_loss = denoising_loss(self.augmentor.with_params(psi_dn), x, self.a_hat, self.schedule,
                                     np.random.default_rng([cfg.seed, _DENOISE, t]))
            backward(dn_loss)
            for k, p in psi_dn.items():
                grads["psi"][k] = grads["psi"][k] + cfg.diffusion.denoise_weight * p.grad

        lam_t = self.lam_at(t)
        penalty, stale = 0.0, False
        if plan.penalty_mode is not None and lam_t > 0:
            detached = [Tensor(xt.data) for xt in x_tildes]
            if plan.penalty_mode == "firstorder":
                penalty, p_grad = invariance_penalty_firstorder(
                    self.spec, state.theta, detached, y, self.a_hat, cfg.hvp_step,
                )
            else:
                if state.bank.is_stale(t, cfg.bank_refresh):
                    state.bank.refresh(self.spec, detached, y, self.a_hat, cfg.bank_steps, t)
                theta_p = fresh_params(state.theta)
                pen = invariance_penalty_exact(self.spec, theta_p, state.bank, detached, y, self.a_hat)
                backward(pen)
                penalty = pen.item()
                # each θ_k should fit its own environment at least as well as θ
                stale = penalty < 0.0
                if stale:
                    logger.warning("iteration %d: predictor bank lags the shared predictor (penalty %.3g)",
                                   t, penalty)
                p_grad = {k: p.grad for k, p in theta_p.items()}
            grads["theta"] = {k: g + lam_t * p_grad[k] for k, g in grads["theta"].items()}

        report = total_loss(
            l_aug_t.item(), penalty, lam_t, reg_value, cfg.ratio_weight if plan.learn_mask else 0.0,
            iteration=t, env_risks=[float(v) for v in risks.data], bank_stale=stale,
            mask_mean=float(m_cau.data.mean()), risk_spread=float(np.ptp(risks.data)),
        )
        return grads, report

    def _baseline_step(self, state: TrainState, t: int) -> tuple[dict[str, dict], LossReport]:
        cfg, plan = self.config, self.plan
        windows = self.train_windows
        if self.segments is None:
            idx = batch_indices(len(windows), cfg.batch_size, cfg.seed, t)
            env_batches = [(windows.x[idx], windows.y[idx])]
        else:
            per_env = max(1, cfg.batch_size // len(self.segments))
            env_batches = []
            for e, seg in enumerate(self.segments):
                idx = seg[batch_indices(len(seg), per_env, cfg.seed, t, stream=e + 1)]
                env_batches.append((windows.x[idx], windows.y[idx]))

        grads: dict[str, dict] = {}
        aware = None
        if plan.method == "invrat":
            eta = fresh_params(state.eta)
            n_envs = len(env_batches)
            aware_risks = [
                mse_loss(predict(self.eta_spec, eta, env_one_hot(x, e, n_envs), self.a_hat), y)
                for e, (x, y) in enumerate(env_batches)
            ]
            aware = [r.item() for r in aware_risks]
            backward(reduce_mean(stack(aware_risks)))
            grads["eta"] = {k: p.grad.copy() for k, p in eta.items()}

        lam_t = self.lam_at(t)
        theta = fresh_params(state.theta)
        risks = env_risk_fns(self.spec, [x for x, _ in env_batches], [y for _, y in env_batches], self.a_hat)
        terms = baseline_loss(plan.method, theta, risks, lam_t, cfg.rex_form, aware, cfg.hvp_step)
        backward(terms.objective)
        g_theta = {k: p.grad.copy() for k, p in theta.items()}
        if terms.penalty_grad is not None:
            g_theta = {k: g + lam_t * terms.penalty_grad[k] for k, g in g_theta.items()}
        grads["theta"] = g_theta

        avg_risk = float(np.mean(terms.env_risks))
        total = terms.objective.item() + (lam_t * terms.penalty if terms.penalty_grad is not None else 0.0)
        report = total_loss(avg_risk, terms.penalty, lam_t, iteration=t, env_risks=terms.env_risks, total=total,
                            risk_spread=float(np.ptp(terms.env_risks)))
        return grads, report

    def step(self, state: TrainState) -> LossReport:
        """One batch: gradients from the current snapshot, then a simultaneous commit."""
        t = state.iteration
        try:
            grads, report = (self._baseline_step if self.plan.baseline else self._augmented_step)(state, t)
        except NonFiniteError as exc:
            raise DivergenceError(f"non-finite value at iteration {t}: {exc}",
                                  {"iteration": t, "last_report": _last(state)}) from exc

        norms = {}
        updated = {}
        for group, g in grads.items():
            params = getattr(state, group)
            if not params:
                continue
            clipped, norms[group] = clip_global_norm(g, self.config.clip_norm)
            updated[group] = adam_step(params, clipped, state.opts[group])

        if not math.isfinite(report.total) or abs(report.total) > self.config.divergence_threshold:
            raise DivergenceError(
                f"loss {report.total:.4g} at iteration {t} exceeds {self.config.divergence_threshold:g}",
                {"iteration": t, "report": report.model_dump(), "grad_norms": norms},
            )
        for group, params in updated.items():
            setattr(state, group, params)
        state.iteration = t + 1
        return report

    # ---------- loop ----------

    def validation_mae(self, theta: Params) -> float:
        return evaluate(self.spec, theta, self.val_windows, self.a_hat, self.data.scaler,
                        method=self.plan.method, seed=self.config.seed, config_hash=self.hash).average.mae

    def run(self, state: TrainState, output_dir: Path | None = None,
            iterations_limit: int | None = None) -> TrainResult:
        cfg = self.config
        stop = cfg.iterations if iterations_limit is None else min(cfg.iterations, iterations_limit)
        best_theta = fresh_params(state.theta)
        if output_dir is not None and (output_dir / "best.npz").exists() and state.best_iteration >= 0:
            arrays, _ = load_checkpoint(output_dir / "best.npz")
            best_theta = {k: Tensor(arrays[f"theta.{k}"], requires_grad=True) for k in state.theta}

        while state.iteration < stop:
            report = self.step(state)
            done = state.iteration
            if done % cfg.eval_every == 0 or done == cfg.iterations:
                val_mae = self.validation_mae(state.theta) if len(self.val_windows) else None
                report = report.model_copy(update={"val_mae": val_mae})
                state.history.append(report)
                logger.info(
                    "iter %d total=%.6f aug=%.6f penalty=%.6f lam=%.3f mask=%s spread=%.6f val_mae=%s",
                    done, report.total, report.augmentation, report.penalty, report.lam,
                    "n/a" if report.mask_mean is None else f"{report.mask_mean:.4f}", report.risk_spread,
                    "n/a" if val_mae is None else f"{val_mae:.6f}",
                )
                if val_mae is not None and val_mae < state.best_val:
                    state.best_val, state.best_iteration = val_mae, done
                    best_theta = fresh_params(state.theta)
                    if output_dir is not None:
                        save_checkpoint(output_dir / "best.npz", state, cfg)
                if output_dir is not None:
                    write_history(output_dir / "history.jsonl", state.history, cfg)

        if output_dir is not None:
            save_checkpoint(output_dir / "last.npz", state, cfg)
        mask_net = self.mask_net.with_params(state.phi) if self.mask_net is not None else None
        denoiser = self.augmentor.with_params(state.psi) if isinstance(self.augmentor, DenoiserNet) else None
        return TrainResult(cfg, self.plan, self.spec, state, best_theta, mask_net, denoiser)


def _last(state: TrainState) -> dict | None:
    return state.history[-1].model_dump() if state.history else None


def train(config: TrainConfig, dataset: StDataset | TrainData, output_dir=None, resume=None,
          iterations_limit: int | None = None) -> TrainResult:
    """Run (or resume) training; returns the final parameters and LossReport history.

    With `output_dir`, best.npz / last.npz checkpoints and history.jsonl are
    written there. `resume` points at a checkpoint of the same config.
    """
    data = dataset if isinstance(dataset, TrainData) else TrainData.from_dataset(
        dataset, getattr(config, "split", SplitSpec()), getattr(config, "standardize", True),
    )
    trainer = Trainer(config, data)
    state = trainer.init_state()
    if resume is not None:
        arrays, meta = load_checkpoint(resume)
        if meta["config_hash"] != trainer.hash:
            raise ConfigError(f"checkpoint {resume} was written by config {meta['config_hash']}, not {trainer.hash}")
        state.load_arrays(arrays)
        state.history = [LossReport(**r) for r in meta["history"]]
        state.best_val = math.inf if meta["best_val"] is None else meta["best_val"]
        state.best_iteration = meta["best_iteration"]
        logger.info("resumed %s at iteration %d", resume, state.iteration)
    out = Path(output_dir) if output_dir is not None else None
    return trainer.run(state, out, iterations_limit)


# =============================================
# EVALUATION
# =============================================

def predict_windows(spec: PredictorSpec, theta: Params, windows: WindowSet, a_hat, batch_size: int = 256) -> np.ndarray:
    frozen = {k: Tensor(p.data) for k, p in theta.items()}
    parts = [
        predict(spec, frozen, windows.x[i:i + batch_size], a_hat).data
        for i in range(0, len(windows), batch_size)
    ]
    return np.concatenate(parts)


def evaluate(spec: PredictorSpec, theta: Params, windows: WindowSet, a_hat, scaler: Standardizer, *,
             method: str, seed: int, config_hash: str) -> MetricsReport:
    """Per-horizon MAE/RMSE/MAPE in original units, plus average and final-step rows."""
    if len(windows) == 0:
        raise ContractError("cannot evaluate on an empty split")
    pred = scaler.inverse_target(predict_windows(spec, theta, windows, a_hat))
    target = scaler.inverse_target(windows.y)
    per_horizon = [metrics(pred[..., j], target[..., j]) for j in range(target.shape[-1])]
    mapes = [m.mape for m in per_horizon if m.mape is not None]
    average = Metrics(
        mae=float(np.mean([m.mae for m in per_horizon])),
        rmse=float(np.mean([m.rmse for m in per_horizon])),
        mape=float(np.mean(mapes)) if mapes else None,
    )
    return MetricsReport(method=method, seed=seed, config_hash=config_hash,
                         per_horizon=per_horizon, average=average, final=per_horizon[-1])
