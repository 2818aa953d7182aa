"""
Planted-causal benchmark on a ring graph.

Each node carries a target channel, F_c causal channels and F_s spurious
channels:

    C_t   = ρ·C_{t-1} + √(1−ρ²)·ε                (per causal channel)
    Y_t+1 = a·Y_t + b·mean_nbr(Y_t) + c·mean(C_t) + σ_p·ε
    S_t   = Y_t+1 + σ_env(t)·ε                   (per spurious channel)

S leaks the next target, so it is the best train-time predictor, but σ_env
jumps at `train_fraction` and the leak turns into noise. Causal channels and
the target's own history keep the same relation to Y throughout.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from diffirm.augment.mask import causal_gap, mask_report, window_masks
from diffirm.bench.checks import QualityChecks
from diffirm.dataset import StDataset
from diffirm.graph import Graph, ring_graph
from diffirm.models.config import (
    DiffusionConfig,
    GraphScmSpec,
    LearningRates,
    PredictorSpec,
    SplitSpec,
    TrainConfig,
    config_hash,
)
from diffirm.trainer import TrainData, TrainResult, evaluate, train

logger = logging.getLogger("diffirm.bench")

_GRAPH_STREAM = 21
_BURN_IN = 50
DEFAULT_METHODS = ("diffirm", "diffirm_minus", "erm")


# =============================================
# FIXTURE
# =============================================

def generate_graph_scm(spec: GraphScmSpec) -> StDataset:
    rng = np.random.default_rng([spec.seed, _GRAPH_STREAM])
    graph = ring_graph(spec.n_nodes)
    a = graph.adjacency
    nbr_mean = a / a.sum(axis=1, keepdims=True)

    steps = _BURN_IN + spec.timesteps + 1
    n, fc = spec.n_nodes, spec.f_causal
    causal = np.zeros((steps, n, fc))
    y = np.zeros((steps, n))
    innovation = math.sqrt(1.0 - spec.causal_ar ** 2)
    for t in range(1, steps):
        causal[t] = spec.causal_ar * causal[t - 1] + innovation * rng.standard_normal((n, fc))
        y[t] = (spec.ar_coef * y[t - 1] + spec.neighbor_coef * (nbr_mean @ y[t - 1])
                + spec.causal_coef * causal[t - 1].mean(axis=1)
                + spec.process_noise * rng.standard_normal(n))
    causal, y = causal[_BURN_IN:], y[_BURN_IN:]   # y has one step beyond the series

    switch = int(spec.train_fraction * spec.timesteps)
    noise = np.where(np.arange(spec.timesteps) < switch,
                     spec.train_spurious_noise, spec.test_spurious_noise)
    spurious = y[1:, :, None] + noise[:, None, None] * rng.standard_normal((spec.timesteps, n, spec.f_spurious))

    series = np.concatenate([y[:-1, :, None], causal[:-1], spurious], axis=2)
    names = ("target", *(f"causal_{i}" for i in range(fc)), *(f"spurious_{j}" for j in range(spec.f_spurious)))
    logger.info("graph SCM: %d nodes, %d steps, %d causal + %d spurious channels, noise switch at step %d",
                n, spec.timesteps, fc, spec.f_spurious, switch)
    return StDataset(
        graph=Graph(graph.adjacency, tuple(f"n{i}" for i in range(n))),
        series=series,
        feature_names=names,
        timestamps=tuple(str(t) for t in range(spec.timesteps)),
        tau=spec.tau,
        horizon=spec.horizon,
        target_channel=0,
        causal_channels=tuple(range(fc + 1)),
    )


def graph_split(spec: GraphScmSpec) -> SplitSpec:
    """Validation is the last stretch before the noise switch; test is everything after."""
    val = min(0.1, spec.train_fraction / 2)
    return SplitSpec(train=spec.train_fraction - val, val=val, test=1.0 - spec.train_fraction)


def audit_graph_scm(ds: StDataset, train_fraction: float) -> pd.DataFrame:
    """Train-segment correlation of every channel at t with the target at t+1."""
    switch = int(train_fraction * ds.n_steps)
    x = ds.series[:switch - 1]
    target = ds.series[1:switch, :, ds.target_channel].ravel()
    rows = [
        {
            "feature": name,
            "causal": c in ds.causal_channels,
            "correlation": float(np.corrcoef(x[:, :, c].ravel(), target)[0, 1]),
        }
        for c, name in enumerate(ds.feature_names)
    ]
    return pd.DataFrame(rows, columns=["feature", "causal", "correlation"])


def audit_passes(audit: pd.DataFrame) -> bool:
    """The trap is set when some spurious channel beats every causal one."""
    spurious = audit.loc[~audit["causal"], "correlation"].abs()
    causal = audit.loc[audit["causal"], "correlation"].abs()
    return bool(len(spurious)) and spurious.max() > causal.max()


# =============================================
# TRAINING
# =============================================

def graph_train_config(method: str = "diffirm", seed: int = 0, spec: GraphScmSpec | None = None,
                       **overrides) -> TrainConfig:
    """Small STGCN-lite settings that train in minutes on the default fixture."""
    spec = spec or GraphScmSpec()
    values = dict(
        method=method,
        seed=seed,
        iterations=600,
        batch_size=16,
        lr=LearningRates(theta=3e-3, phi=3e-3, psi=1e-3, eta=3e-3),
        lam=1.0,
        k_envs=3,
        predictor=PredictorSpec(backbone="stgcn_lite", hidden=8, kernel=2,
                                tau=spec.tau, horizon=spec.horizon,
                                n_features=1 + spec.f_causal + spec.f_spurious, n_nodes=spec.n_nodes),
        diffusion=DiffusionConfig(l_diff=50, hidden=16, d_emb=8),
        mask_hidden=16,
        ratio_alpha=(1 + spec.f_causal) / (1 + spec.f_causal + spec.f_spurious) if spec.f_spurious else 0.5,
        eval_every=50,
        n_envs=2,
    )
    values.update(overrides)
    return TrainConfig(**values)


def identification_gap(result: TrainResult, data: TrainData) -> float | None:
    """Mean mask over causal channels minus spurious channels on the train windows."""
    if result.mask_net is None:
        return None
    spurious = [c for c in range(data.n_features) if c not in data.causal_channels]
    if not spurious:
        return None
    report = mask_report(window_masks(result.mask_net, data.train.x), data.feature_names)
    return causal_gap(report, data.causal_channels, spurious)


@dataclass
class GraphBenchReport:
    runs: pd.DataFrame
    medians: pd.DataFrame
    audit: pd.DataFrame
    audit_ok: bool


def run_graph_benchmark(spec: GraphScmSpec, methods: Sequence[str] = DEFAULT_METHODS,
                        seeds: Sequence[int] = range(5), iterations: int | None = None,
                        output_dir=None) -> GraphBenchReport:
    """Train every method on every seed; test MAE and mask gap per run."""
    ds = generate_graph_scm(spec)
    audit = audit_graph_scm(ds, spec.train_fraction)
    audit_ok = audit_passes(audit)
    data = TrainData.from_dataset(ds, graph_split(spec))

    rows = []
    for method in methods:
        for seed in seeds:
            overrides = {} if iterations is None else {"iterations": iterations}
            cfg = graph_train_config(method, seed, spec, **overrides)
            run_dir = None if output_dir is None else Path(output_dir) / f"{method}_seed{seed}"
            result = train(cfg, data, output_dir=run_dir)
            test = evaluate(result.spec, result.best_theta, result.windows(data.test), data.a_hat, data.scaler,
                            method=method, seed=seed, config_hash=config_hash(cfg))
            gap = identification_gap(result, data)
            rows.append({
                "method": method,
                "seed": seed,
                "test_mae": test.average.mae,
                "best_val_mae": None if math.isinf(result.state.best_val) else result.state.best_val,
                "mask_gap": gap,
            })
            logger.info("%-14s seed=%d test_mae=%.4f mask_gap=%s", method, seed, test.average.mae,
                        "n/a" if gap is None else f"{gap:.3f}")

    runs = pd.DataFrame(rows, columns=["method", "seed", "test_mae", "best_val_mae", "mask_gap"])
    runs = runs.astype({"test_mae": float, "best_val_mae": float, "mask_gap": float})
    medians = (
        runs.groupby("method", sort=False)[["test_mae", "mask_gap"]]
        .median()
        .reset_index()
        .rename(columns={"test_mae": "median_test_mae", "mask_gap": "median_mask_gap"})
    )
    return GraphBenchReport(runs, medians, audit, audit_ok)


# =============================================
# ACCEPTANCE CHECKS
# =============================================

def graph_acceptance_checks(report: GraphBenchReport, gap_threshold: float = 0.3,
                            seed_fraction: float = 0.8, margin: float = 0.1) -> dict:
    """
    Post-run quality checks on the graph benchmark.
    Logs one ✓/✗ line per check and raises AcceptanceError if any fail.
    """
    checks = QualityChecks("graph acceptance")
    medians = report.medians.set_index("method")["median_test_mae"]

    # Check 1: the fixture actually sets the spurious trap
    best = report.audit.loc[report.audit["correlation"].abs().idxmax(), "feature"]
    checks.check("fixture audit", report.audit_ok, f"most train-correlated channel: {best}")

    # Check 2: the learned mask separates causal from spurious channels
    gaps = report.runs.loc[report.runs["method"] == "diffirm", "mask_gap"].dropna()
    if len(gaps):
        needed = math.ceil(seed_fraction * len(gaps))
        hits = int((gaps >= gap_threshold).sum())
        checks.check("identification", hits >= needed,
                     f"{hits}/{len(gaps)} seeds with gap >= {gap_threshold} (need {needed})")

    # Check 3: ordering of median test MAE
    if {"diffirm", "diffirm_minus"} <= set(medians.index):
        checks.check("diffirm < diffirm_minus", medians["diffirm"] < medians["diffirm_minus"],
                     f"{medians['diffirm']:.4f} vs {medians['diffirm_minus']:.4f}")
    if {"diffirm_minus", "erm"} <= set(medians.index):
        checks.check("diffirm_minus < erm", medians["diffirm_minus"] < medians["erm"],
                     f"{medians['diffirm_minus']:.4f} vs {medians['erm']:.4f}")
    if {"diffirm", "erm"} <= set(medians.index):
        bound = (1.0 - margin) * medians["erm"]
        checks.check("diffirm margin", medians["diffirm"] <= bound,
                     f"{medians['diffirm']:.4f} (needs <= {bound:.4f}, {margin:.0%} below erm)")

    return checks.finish()
