"""
Command-line entry point: `python -m diffirm <command>`.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure,
3 a benchmark ran but missed an acceptance threshold.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from diffirm import __version__
from diffirm.augment.diffusion import sample_environment
from diffirm.augment.mask import CausalMaskNet, combine, constant_mask, generate_mask, mask_report, window_masks
from diffirm.augment.perturb import perturb
from diffirm.bench.checks import QualityChecks
from diffirm.bench.gradients import CASES, gradient_suite
from diffirm.bench.graph_scm import DEFAULT_METHODS, graph_acceptance_checks, run_graph_benchmark
from diffirm.bench.scm import (
    augment_scm_features,
    conditional_checks,
    generate_scm,
    hard_mask_solutions,
    motivating_seed_sweep,
    motivating_train_config,
    run_acceptance_checks,
    run_motivating_experiment,
)
from diffirm.config import configure_logging, settings
from diffirm.core.tensor import Tensor
from diffirm.errors import AcceptanceError, ConfigError, DiffIRMError
from diffirm.ingest import ingest_csv, load_run_config, write_csv, write_json
from diffirm.models.config import METHODS, GraphScmSpec, RunConfig, ScmSpec, config_hash
from diffirm.trainer import TrainData, Trainer, evaluate, load_checkpoint, sub_seed, train

logger = logging.getLogger("diffirm.cli")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_ACCEPTANCE = 0, 1, 2, 3


# =============================================
# HELPERS
# =============================================

def _seed(value: int | None) -> int:
    if value is not None:
        return value
    return settings.seed if settings.seed is not None else 0


def _out_dir(value: str | None, default: str) -> Path:
    return Path(value) if value else Path(settings.output_dir) / default


def _jsonable(value: float | None) -> float | None:
    return None if value is None or math.isnan(value) else value


def _load_dataset(config: RunConfig):
    if not config.features_path or not config.adjacency_path:
        raise ConfigError("run config needs features_path and adjacency_path")
    return ingest_csv(config.features_path, config.adjacency_path, config.predictor.tau,
                      config.predictor.horizon, config.target_channel, config.feature_names)


def _resolve_checkpoint(name: str, run_dir: str | None) -> Path:
    if name in ("best", "last"):
        return Path(run_dir or settings.output_dir) / f"{name}.npz"
    return Path(name)


def _restore(checkpoint: Path):
    """Config, trainer (rebuilt on the config's dataset) and parameter arrays of a checkpoint."""
    if not checkpoint.exists():
        raise ConfigError(f"checkpoint {checkpoint} does not exist")
    arrays, meta = load_checkpoint(checkpoint)
    try:
        config = RunConfig.model_validate(meta["config"])
    except ValueError as exc:
        raise ConfigError(f"checkpoint {checkpoint} does not carry a run config: {exc}") from exc
    data = TrainData.from_dataset(_load_dataset(config), config.split, config.standardize)
    trainer = Trainer(config, data)
    if trainer.hash != meta["config_hash"]:
        raise ConfigError(f"checkpoint {checkpoint} hash {meta['config_hash']} does not match its config")
    return config, trainer, arrays


def _group(arrays: dict[str, np.ndarray], prefix: str) -> dict[str, Tensor]:
    return {k[len(prefix):]: Tensor(v) for k, v in arrays.items() if k.startswith(prefix)}


# =============================================
# COMMANDS
# =============================================

def cmd_scm_bench(args) -> int:
    seed = _seed(args.seed)
    out = _out_dir(args.out, "scm-bench")
    spec = ScmSpec(seed=seed, **({"n": args.n} if args.n else {}))
    overrides = {"iterations": args.iterations} if args.iterations else {}
    train_config = motivating_train_config("diffirm", seed, **overrides)
    digest = config_hash(spec, train_config)

    report = run_motivating_experiment(spec, train_config, include_diffirm=not args.skip_train,
                                       include_trained_erm=args.trained_erm)
    if report.result is not None and report.result.denoiser is not None:
        data = generate_scm(spec, "train", n=min(spec.n, 100_000))
        conditionals = conditional_checks(spec, augment_scm_features(report.result, data, seed), data)
    else:
        conditionals = conditional_checks(spec)

    sweep = None
    if args.seeds:
        sweep = motivating_seed_sweep(spec, range(args.seeds), min(4, args.seeds), **overrides)
        write_csv(sweep.table, out / "seeds.csv", digest, seed)
    hard_masks = hard_mask_solutions(generate_scm(spec, "train"), train_config.k_envs, seed)

    write_csv(report.table, out / "table1.csv", digest, seed)
    write_csv(conditionals.table, out / "conditionals.csv", digest, seed)
    summary = {
        "config_hash": digest,
        "seed": seed,
        "hard_masks": hard_masks.to_dict("records"),
        "gaps": {f"{c:g}": _jsonable(g) for c, g in conditionals.gaps.items()},
        "skipped_bins": {f"{c:g}": n for c, n in conditionals.skipped_bins.items()},
        "sigma_consistent": conditionals.sigma_consistent,
        "ground_truth_slope": conditionals.ground_truth_slope,
    }
    try:
        summary["checks"] = run_acceptance_checks(report.table, conditionals, sweep=sweep)
    except AcceptanceError as exc:
        summary["checks"] = exc.report
        raise
    finally:
        write_json(summary, out / "summary.json")
    print(f"scm-bench: {summary['checks']['passed']} checks passed, outputs in {out}")
    return EXIT_OK


def cmd_graph_bench(args) -> int:
    seed = _seed(args.seed)
    out = _out_dir(args.out, "graph-bench")
    spec = GraphScmSpec(seed=seed)
    seeds = list(range(args.seeds))
    digest = config_hash(spec)

    report = run_graph_benchmark(spec, args.methods, seeds, iterations=args.iterations)
    write_csv(report.runs, out / "runs.csv", digest, seed)
    write_csv(report.medians, out / "medians.csv", digest, seed)
    write_csv(report.audit, out / "audit.csv", digest, seed)
    summary = {"config_hash": digest, "seed": seed, "methods": list(args.methods), "seeds": seeds,
               "audit_ok": report.audit_ok}
    try:
        summary["checks"] = graph_acceptance_checks(report)
    except AcceptanceError as exc:
        summary["checks"] = exc.report
        raise
    finally:
        write_json(summary, out / "summary.json")
    print(f"graph-bench: {summary['checks']['passed']} checks passed, outputs in {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = load_run_config(args.config)
    out = Path(args.out or config.output_dir)
    result = train(config, _load_dataset(config), output_dir=out, resume=args.resume,
                   iterations_limit=args.iterations_limit)
    best = result.state.best_val
    print(f"train: {config.method} stopped at iteration {result.state.iteration}, "
          f"best val MAE {'n/a' if math.isinf(best) else f'{best:.6g}'}, checkpoints in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    path = _resolve_checkpoint(args.checkpoint, args.run_dir)
    config, trainer, arrays = _restore(path)
    theta = _group(arrays, "theta.")
    windows = trainer.select_windows(getattr(trainer.data, args.split))
    report = evaluate(trainer.spec, theta, windows, trainer.a_hat, trainer.data.scaler,
                      method=config.method, seed=config.seed, config_hash=trainer.hash)
    out = Path(args.out) if args.out else path.parent / f"metrics_{path.stem}_{args.split}.json"
    write_json(report.model_dump(mode="json"), out)
    print(f"eval: {args.split} MAE {report.average.mae:.6g} (final step {report.final.mae:.6g}), wrote {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    table = gradient_suite(args.instances, _seed(args.seed), args.ops)
    checks = QualityChecks("gradcheck")
    for row in table.itertuples():
        print(f"{row.op:<22} {row.max_error:.3e}")
        checks.check(row.op, row.max_error < settings.gradcheck_tolerance,
                     f"{row.max_error:.3e} (< {settings.gradcheck_tolerance:g})")
    checks.finish()
    return EXIT_OK


def cmd_mask_report(args) -> int:
    path = _resolve_checkpoint(args.checkpoint, args.run_dir)
    config, trainer, arrays = _restore(path)
    phi = _group(arrays, "phi.")
    if not phi:
        raise ConfigError(f"checkpoint {path} has no learned mask ({config.method})")
    net = CausalMaskNet(trainer.spec.tau, trainer.spec.n_features, config.mask_hidden, phi)
    report = mask_report(window_masks(net, trainer.train_windows.x), trainer.data.feature_names)
    out = Path(args.out) if args.out else path.parent / "mask_report.csv"
    write_csv(report, out, trainer.hash, config.seed, index=True)
    print(f"mask-report: {len(report)} features x {report.shape[1]} lags, wrote {out}")
    return EXIT_OK


def cmd_augment_preview(args) -> int:
    path = _resolve_checkpoint(args.checkpoint, args.run_dir)
    config, trainer, arrays = _restore(path)
    psi = _group(arrays, "psi.")
    if trainer.augmentor is None or not psi:
        raise ConfigError(f"checkpoint {path} has no augmentor ({config.method})")
    augmentor = trainer.augmentor.with_params(psi)
    data = trainer.data
    windows = trainer.train_windows
    index = args.window if args.window >= 0 else len(windows) + args.window
    if not 0 <= index < len(windows):
        raise ConfigError(f"window {args.window} outside the {len(windows)} training windows")
    x, end = windows.x[index], int(windows.end_index[index])

    if trainer.plan.learn_mask:
        mask_net = CausalMaskNet(trainer.spec.tau, trainer.spec.n_features, config.mask_hidden, _group(arrays, "phi."))
        m = generate_mask(mask_net, x)
    else:
        m = constant_mask(x.shape, trainer.plan.fixed_mask)

    k = args.k or config.k_envs
    seed = _seed(args.seed)
    out = Path(args.out) if args.out else path.parent / "augment_preview"
    write_csv(_window_frame(x, end, data), out / "original.csv", trainer.hash, seed)
    for i in range(k):
        rng = np.random.default_rng([sub_seed(seed, 13), i])
        if trainer.schedule is not None:
            x_hat = sample_environment(x, trainer.a_hat, augmentor, trainer.schedule,
                                       config.diffusion.augment_depth, rng)
        else:
            x_hat = perturb(augmentor, x, rng)
        x_tilde = combine(x, Tensor(x_hat.data), Tensor(m.data)).data
        write_csv(_window_frame(x_tilde, end, data), out / f"augmented_{i}.csv", trainer.hash, seed)
    print(f"augment-preview: original + {k} augmented copies of window {index}, wrote {out}")
    return EXIT_OK


def _window_frame(x: np.ndarray, end: int, data: TrainData) -> pd.DataFrame:
    """One window (N×τ×F, standardized) in the features-CSV layout, in original units.

    The timestamp column holds series step indices.
    """
    n, tau, f = x.shape
    values = data.scaler.inverse_transform(x.transpose(1, 0, 2)).reshape(tau * n, f)
    frame = pd.DataFrame(values, columns=list(data.feature_names))
    node_ids = list(data.node_ids) or [str(i) for i in range(n)]
    frame.insert(0, "node_id", node_ids * tau)
    frame.insert(0, "timestamp", np.repeat(np.arange(end - tau + 1, end + 1), n))
    return frame


def cmd_version(args) -> int:
    print(f"diffirm {__version__}")
    return EXIT_OK


# =============================================
# PARSER
# =============================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffirm", description="Diffusion-augmented invariant risk minimization")
    parser.add_argument("--log-level", default=None, help="overrides DIFFIRM_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scm-bench", help="motivating SCM table and conditional checks")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--n", type=int, default=None, help="samples per environment")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--skip-train", action="store_true", help="closed-form rows only")
    p.add_argument("--trained-erm", action="store_true", help="also train linear ERM")
    p.add_argument("--seeds", type=int, default=0, help="also run diffIRM on seeds 0..N-1 and score the band")
    p.set_defaults(handler=cmd_scm_bench)

    p = sub.add_parser("graph-bench", help="planted-causal graph benchmark")
    p.add_argument("--seed", type=int, default=None, help="fixture seed")
    p.add_argument("--seeds", type=int, default=5, help="training seeds per method")
    p.add_argument("--methods", nargs="+", choices=METHODS, default=list(DEFAULT_METHODS))
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(handler=cmd_graph_bench)

    p = sub.add_parser("train", help="train on an ingested dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="checkpoint directory, default the config's output_dir")
    p.add_argument("--resume", default=None)
    p.add_argument("--iterations-limit", type=int, default=None)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="metrics JSON for a checkpoint")
    p.add_argument("--checkpoint", default="best", help="best, last or a path")
    p.add_argument("--run-dir", default=None)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--out", default=None)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference sweep of every op")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--ops", nargs="+", choices=list(CASES), default=None)
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("mask-report", help="mean causal mask per feature and lag")
    p.add_argument("--checkpoint", default="best")
    p.add_argument("--run-dir", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(handler=cmd_mask_report)

    p = sub.add_parser("augment-preview", help="original vs augmented copies of one window")
    p.add_argument("--checkpoint", default="best")
    p.add_argument("--run-dir", default=None)
    p.add_argument("--window", type=int, default=0, help="training window index, negative counts from the end")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(handler=cmd_augment_preview)

    p = sub.add_parser("version")
    p.set_defaults(handler=cmd_version)
    return parser


def cli_dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    configure_logging(args.log_level)

    try:
        return args.handler(args)
    except ConfigError as exc:
        logger.exception("configuration error")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except AcceptanceError as exc:
        logger.exception("acceptance checks failed")
        print(f"acceptance failed: {exc}", file=sys.stderr)
        return EXIT_ACCEPTANCE
    except (DiffIRMError, OSError) as exc:
        logger.exception("%s failed", args.command)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(cli_dispatch())
