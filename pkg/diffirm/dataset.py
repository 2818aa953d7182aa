"""
Spatiotemporal datasets, sliding windows and temporal splits.

Series are stored time-major (T×N×F). A window pairs the τ steps ending at t
(X, laid out N×τ×F) with the target channel of the τ′ steps after t
(Y, N×τ′).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

from diffirm.errors import ContractError, DimensionError
from diffirm.graph import Graph
from diffirm.models.config import SplitSpec


@dataclass(frozen=True)
class StDataset:
    graph: Graph
    series: np.ndarray
    feature_names: tuple[str, ...]
    timestamps: tuple
    tau: int
    horizon: int
    target_channel: int = 0
    # ground-truth causal channels, known only for synthetic fixtures
    causal_channels: tuple[int, ...] = field(default=())

    def __post_init__(self):
        s = np.asarray(self.series, dtype=np.float64)
        if s.ndim != 3:
            raise DimensionError(f"series must be T×N×F, got shape {s.shape}")
        t, n, f = s.shape
        if n != self.graph.n_nodes:
            raise DimensionError(f"series has {n} nodes, graph has {self.graph.n_nodes}")
        if f < 1 or len(self.feature_names) != f:
            raise ContractError(f"{len(self.feature_names)} feature names for {f} channels")
        if len(self.timestamps) != t:
            raise ContractError(f"{len(self.timestamps)} timestamps for {t} steps")
        if self.tau < 1 or self.horizon < 1:
            raise ContractError("tau and horizon must be positive")
        if not 0 <= self.target_channel < f:
            raise ContractError(f"target channel {self.target_channel} outside 0..{f - 1}")
        object.__setattr__(self, "series", s)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "timestamps", tuple(self.timestamps))

    @property
    def n_steps(self) -> int:
        return self.series.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.series.shape[1]

    @property
    def n_features(self) -> int:
        return self.series.shape[2]

    def segment(self, start: int, stop: int) -> StDataset:
        return replace(self, series=self.series[start:stop], timestamps=self.timestamps[start:stop])


@dataclass(frozen=True)
class WindowSet:
    """Windows in temporal order; iterates as (X, Y) pairs."""

    x: np.ndarray          # W×N×τ×F
    y: np.ndarray          # W×N×τ′
    end_index: np.ndarray  # series index of each window's last input step

    def __len__(self) -> int:
        return self.x.shape[0]

    def __iter__(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        for i in range(len(self)):
            yield self.x[i], self.y[i]

    def __getitem__(self, index):
        if isinstance(index, (int, np.integer)):
            return self.x[index], self.y[index]
        return self.subset(index)

    def subset(self, index) -> WindowSet:
        return WindowSet(self.x[index], self.y[index], self.end_index[index])

    def select_channels(self, channels: Sequence[int]) -> WindowSet:
        return WindowSet(self.x[..., list(channels)], self.y, self.end_index)

    @classmethod
    def from_arrays(cls, x: np.ndarray, y: np.ndarray) -> WindowSet:
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if x.ndim != 4 or y.ndim != 3 or x.shape[:2] != y.shape[:2]:
            raise DimensionError(f"windows need X W×N×τ×F and Y W×N×τ′, got {x.shape} and {y.shape}")
        return cls(x, y, np.arange(x.shape[0]))

    @classmethod
    def concat(cls, parts: Sequence[WindowSet]) -> WindowSet:
        return cls(
            np.concatenate([p.x for p in parts]),
            np.concatenate([p.y for p in parts]),
            np.concatenate([p.end_index for p in parts]),
        )


def make_windows(ds: StDataset, offset: int = 0) -> WindowSet:
    """All T − τ − τ′ + 1 windows, in temporal order."""
    t, tau, horizon = ds.n_steps, ds.tau, ds.horizon
    if t < tau + horizon:
        raise ContractError(f"series of {t} steps is too short for tau={tau}, horizon={horizon}")
    count = t - tau - horizon + 1
    xs = np.stack([ds.series[i:i + tau].transpose(1, 0, 2) for i in range(count)])
    ys = np.stack([ds.series[i + tau:i + tau + horizon, :, ds.target_channel].T for i in range(count)])
    ends = np.arange(count) + tau - 1 + offset
    return WindowSet(xs, ys, ends)


def split_counts(total: int, spec: SplitSpec) -> tuple[int, int, int]:
    """Partition sizes; fractional parts are floored and the remainder goes to train."""
    if spec.absolute:
        n_train, n_val, n_test = int(spec.train), int(spec.val), int(spec.test)
        if n_train + n_val + n_test > total:
            raise ContractError(f"absolute split {n_train}/{n_val}/{n_test} exceeds {total}")
    else:
        n_val = int(np.floor(spec.val * total + 1e-9))
        n_test = int(np.floor(spec.test * total + 1e-9))
        n_train = total - n_val - n_test
    if min(n_train, n_val, n_test) < 1:
        raise ContractError(f"split of {total} leaves an empty partition ({n_train}/{n_val}/{n_test})")
    return n_train, n_val, n_test


def temporal_split(windows: WindowSet, spec: SplitSpec) -> tuple[WindowSet, WindowSet, WindowSet]:
    """Contiguous train/val/test partition of a window sequence."""
    total = len(windows)
    n_train, n_val, n_test = split_counts(total, spec)
    train = windows.subset(slice(0, n_train))
    val = windows.subset(slice(n_train, n_train + n_val))
    test = windows.subset(slice(total - n_test, total))
    return train, val, test


def split_timesteps(ds: StDataset, spec: SplitSpec) -> tuple[StDataset, StDataset, StDataset]:
    """Split the series itself: train from the start, val next, test at the end.

    With absolute counts any unassigned steps between val and test are dropped,
    so "first 56, next 16, final 16" of a 90-step series leaves two unused steps.
    """
    n_train, n_val, n_test = split_counts(ds.n_steps, spec)
    return (
        ds.segment(0, n_train),
        ds.segment(n_train, n_train + n_val),
        ds.segment(ds.n_steps - n_test, ds.n_steps),
    )


def prepare_windows(ds: StDataset, spec: SplitSpec) -> tuple[WindowSet, WindowSet, WindowSet]:
    """Window and split a dataset without any window straddling two partitions.

    Fractional specs split the window sequence (the 60/20/20 rule); absolute
    specs split the time axis first and window each segment.
    """
    if not spec.absolute:
        return temporal_split(make_windows(ds), spec)
    train, val, test = split_timesteps(ds, spec)
    starts = (0, train.n_steps, ds.n_steps - test.n_steps)
    return tuple(make_windows(part, offset=start) for part, start in zip((train, val, test), starts))


@dataclass(frozen=True)
class Standardizer:
    """Per-channel z-scoring fit on training steps only."""

    mean: np.ndarray
    std: np.ndarray
    target_channel: int = 0

    @classmethod
    def fit(cls, series: np.ndarray, target_channel: int = 0) -> Standardizer:
        flat = np.asarray(series, dtype=np.float64).reshape(-1, series.shape[-1])
        std = flat.std(axis=0)
        std = np.where(std > 1e-12, std, 1.0)
        return cls(flat.mean(axis=0), std, target_channel)

    @classmethod
    def identity(cls, n_features: int, target_channel: int = 0) -> Standardizer:
        return cls(np.zeros(n_features), np.ones(n_features), target_channel)

    def transform(self, series: np.ndarray) -> np.ndarray:
        return (series - self.mean) / self.std

    def inverse_transform(self, series: np.ndarray) -> np.ndarray:
        return series * self.std + self.mean

    def inverse_target(self, values: np.ndarray) -> np.ndarray:
        c = self.target_channel
        return values * self.std[c] + self.mean[c]

    def apply(self, ds: StDataset) -> StDataset:
        return replace(ds, series=self.transform(ds.series))


def standardize_for_training(
    ds: StDataset, spec: SplitSpec, enabled: bool = True,
) -> tuple[tuple[WindowSet, WindowSet, WindowSet], Standardizer]:
    """Fit the standardizer on the steps the train windows read, then window."""
    if not enabled:
        return prepare_windows(ds, spec), Standardizer.identity(ds.n_features, ds.target_channel)
    train, _, _ = prepare_windows(ds, spec)
    last_input = int(train.end_index.max())
    scaler = Standardizer.fit(ds.series[:last_input + 1], ds.target_channel)
    return prepare_windows(scaler.apply(ds), spec), scaler
