"""
Tests for the planted-causal ring-graph benchmark.
"""
import numpy as np
import pandas as pd
import pytest

from diffirm.bench.graph_scm import (
    GraphBenchReport,
    audit_graph_scm,
    audit_passes,
    generate_graph_scm,
    graph_acceptance_checks,
    graph_split,
    graph_train_config,
    run_graph_benchmark,
)
from diffirm.errors import AcceptanceError
from diffirm.models.config import GraphScmSpec


def _report(medians=(0.5, 0.6, 0.8), gaps=(0.5, 0.4, 0.35, 0.6, 0.1), audit_ok=True):
    runs = pd.DataFrame({
        "method": ["diffirm"] * len(gaps),
        "seed": range(len(gaps)),
        "test_mae": [medians[0]] * len(gaps),
        "best_val_mae": [0.1] * len(gaps),
        "mask_gap": list(gaps),
    })
    med = pd.DataFrame({
        "method": ["diffirm", "diffirm_minus", "erm"],
        "median_test_mae": list(medians),
        "median_mask_gap": [float(np.median(gaps)), np.nan, np.nan],
    })
    audit = pd.DataFrame({
        "feature": ["target", "causal_0", "spurious_0"],
        "causal": [True, True, False],
        "correlation": [0.5, 0.4, 0.95],
    })
    return GraphBenchReport(runs, med, audit, audit_ok)


def test_fixture_shape_and_names():
    """Target, causal and spurious channels on an N-node ring."""
    spec = GraphScmSpec(n_nodes=5, timesteps=50, f_causal=2, f_spurious=1)
    ds = generate_graph_scm(spec)
    assert ds.series.shape == (50, 5, 4)
    assert ds.feature_names == ("target", "causal_0", "causal_1", "spurious_0")
    assert ds.causal_channels == (0, 1, 2)
    assert ds.graph.node_ids == ("n0", "n1", "n2", "n3", "n4")
    assert ds.graph.adjacency.sum() == 10


def test_fixture_is_seeded():
    """Same spec, same series."""
    spec = GraphScmSpec(n_nodes=4, timesteps=30)
    np.testing.assert_array_equal(generate_graph_scm(spec).series, generate_graph_scm(spec).series)


def test_spurious_channel_leaks_next_target():
    """Before the switch S_t tracks Y_{t+1}; after it the leak is buried in noise."""
    spec = GraphScmSpec(n_nodes=4, timesteps=200)
    ds = generate_graph_scm(spec)
    switch = int(spec.train_fraction * spec.timesteps)
    s, y = ds.series[:, :, 3], ds.series[:, :, 0]
    before = np.corrcoef(s[:switch - 1].ravel(), y[1:switch].ravel())[0, 1]
    after = np.corrcoef(s[switch:-1].ravel(), y[switch + 1:].ravel())[0, 1]
    assert before > 0.9
    assert after < before - 0.3


def test_default_audit_passes():
    """On the train segment a spurious channel is the most correlated one."""
    spec = GraphScmSpec()
    audit = audit_graph_scm(generate_graph_scm(spec), spec.train_fraction)
    assert list(audit.columns) == ["feature", "causal", "correlation"]
    assert audit_passes(audit)


def test_audit_fails_without_spurious_channels():
    """No spurious channel, no trap."""
    spec = GraphScmSpec(f_spurious=0, timesteps=100)
    ds = generate_graph_scm(spec)
    assert ds.n_features == 3
    assert not audit_passes(audit_graph_scm(ds, spec.train_fraction))


def test_split_puts_test_after_the_switch():
    """Validation sits just before the switch; test is everything after it."""
    split = graph_split(GraphScmSpec(train_fraction=0.6))
    assert split.train == pytest.approx(0.5)
    assert split.val == pytest.approx(0.1)
    assert split.test == pytest.approx(0.4)


def test_train_config_ratio_target():
    """The causal-ratio target is the causal share of channels."""
    cfg = graph_train_config("diffirm", 1, GraphScmSpec(f_causal=2, f_spurious=2), iterations=7)
    assert cfg.ratio_alpha == pytest.approx(3 / 5)
    assert cfg.iterations == 7 and cfg.seed == 1
    assert cfg.predictor.backbone == "stgcn_lite" and cfg.predictor.n_features == 5


def test_acceptance_checks_pass():
    """Audit, 4/5 identification hits and the MAE ordering pass."""
    summary = graph_acceptance_checks(_report())
    assert summary["failed"] == []
    assert summary["passed"] == 5


def test_acceptance_checks_fail_on_margin_and_identification():
    """Too few seeds above the gap and too small a margin over ERM both fail."""
    with pytest.raises(AcceptanceError) as exc:
        graph_acceptance_checks(_report(medians=(0.75, 0.78, 0.8), gaps=(0.5, 0.1, 0.1, 0.6, 0.1)))
    assert exc.value.failed == ["identification", "diffirm margin"]


def test_acceptance_checks_fail_on_audit():
    """A fixture without the trap fails regardless of the runs."""
    with pytest.raises(AcceptanceError) as exc:
        graph_acceptance_checks(_report(audit_ok=False))
    assert exc.value.failed == ["fixture audit"]


def test_small_benchmark_run(tmp_path):
    """Two iterations per method on a tiny ring produce one row per (method, seed)."""
    spec = GraphScmSpec(n_nodes=4, timesteps=60)
    report = run_graph_benchmark(spec, methods=("diffirm", "erm"), seeds=[0], iterations=2, output_dir=tmp_path)
    assert report.runs[["method", "seed"]].values.tolist() == [["diffirm", 0], ["erm", 0]]
    gaps = report.runs.set_index("method")["mask_gap"]
    assert np.isfinite(gaps["diffirm"]) and np.isnan(gaps["erm"])
    assert np.all(np.isfinite(report.runs["test_mae"]))
    assert list(report.medians["method"]) == ["diffirm", "erm"]
    assert (tmp_path / "diffirm_seed0" / "last.npz").exists()


@pytest.mark.slow
def test_full_benchmark_meets_acceptance():
    """Five seeds per method on the default fixture."""
    report = run_graph_benchmark(GraphScmSpec())
    assert graph_acceptance_checks(report)["failed"] == []
