"""
Causal mask generator T_φ, the X/X̂ blend and the causal-ratio regularizer.

The mask network is a two-layer perceptron shared by every node: it reads a
node's τ·F history and emits a soft mask of the same size through a sigmoid,
so entries are always strictly inside (0, 1).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np
import pandas as pd

from diffirm.core.tensor import (
    Tensor,
    activation,
    affine,
    as_tensor,
    elementwise,
    reduce_mean,
    reshape,
    shift,
    square,
)
from diffirm.errors import ContractError, DimensionError

Params = dict[str, Tensor]


@dataclass(frozen=True)
class CausalMaskNet:
    tau: int
    n_features: int
    hidden: int = 32
    params: Params = field(default_factory=dict)

    @classmethod
    def init(cls, tau: int, n_features: int, hidden: int = 32, seed: int = 0) -> CausalMaskNet:
        rng = np.random.default_rng(seed)
        width = tau * n_features

        def glorot(fan_in, fan_out):
            s = np.sqrt(6.0 / (fan_in + fan_out))
            return Tensor(rng.uniform(-s, s, (fan_in, fan_out)), requires_grad=True)

        params = {
            "hidden.w": glorot(width, hidden),
            "hidden.b": Tensor(np.zeros(hidden), requires_grad=True),
            "out.w": glorot(hidden, width),
            "out.b": Tensor(np.zeros(width), requires_grad=True),
        }
        return cls(tau, n_features, hidden, params)

    def with_params(self, params: Params) -> CausalMaskNet:
        return CausalMaskNet(self.tau, self.n_features, self.hidden, params)


def generate_mask(net: CausalMaskNet, x) -> Tensor:
    """M_cau = T_φ(X), same shape as X (N×τ×F or B×N×τ×F)."""
    x = as_tensor(x)
    if x.ndim not in (3, 4) or x.shape[-2:] != (net.tau, net.n_features):
        raise DimensionError(f"mask net expects (…, N, {net.tau}, {net.n_features}), got {x.shape}")
    width = net.tau * net.n_features
    rows = x.size // width
    flat = reshape(x, (rows, width))
    h = activation(affine(flat, net.params["hidden.w"], net.params["hidden.b"]), "relu")
    m = activation(affine(h, net.params["out.w"], net.params["out.b"]), "sigmoid")
    return reshape(m, x.shape)


def constant_mask(shape: Sequence[int], value: float) -> Tensor:
    return Tensor(np.full(tuple(shape), float(value)))


def combine(x, x_hat, m_cau) -> Tensor:
    """X̃ = X ⊙ M_cau + X̂ ⊙ (1 − M_cau)."""
    x, x_hat, m_cau = as_tensor(x), as_tensor(x_hat), as_tensor(m_cau)
    if not (x.shape == x_hat.shape == m_cau.shape):
        raise DimensionError(f"combine shapes differ: {x.shape}, {x_hat.shape}, {m_cau.shape}")
    if m_cau.data.min() < 0.0 or m_cau.data.max() > 1.0:
        raise ContractError("causal mask entries must lie in [0, 1]")
    keep = elementwise(x, m_cau, "mul")
    swap = elementwise(x_hat, 1.0 - m_cau, "mul")
    return elementwise(keep, swap, "add")


def ratio_regularizer(m_cau, alpha: float = 0.5) -> Tensor:
    """(mean(M_cau) − α)²."""
    if not 0.0 < alpha < 1.0:
        raise ContractError(f"target causal ratio must be in (0, 1), got {alpha}")
    return square(shift(reduce_mean(as_tensor(m_cau)), -alpha))


def mask_report(masks: Iterable, feature_names: Sequence[str]) -> pd.DataFrame:
    """Mean mask per (feature, lag) over nodes and windows.

    Column lag_j is the step j before the forecast origin, so lag_0 is the most
    recent observation.
    """
    total, count = None, 0
    for m in masks:
        arr = np.asarray(m.data if isinstance(m, Tensor) else m, dtype=np.float64)
        arr = arr.reshape(-1, *arr.shape[-2:])            # (windows·nodes)×τ×F
        part = arr.sum(axis=0)
        total = part if total is None else total + part
        count += arr.shape[0]
    if total is None or count == 0:
        raise ContractError("mask_report needs at least one mask")
    tau, n_features = total.shape
    if len(feature_names) != n_features:
        raise ContractError(f"{len(feature_names)} feature names for {n_features} mask channels")
    mean = (total / count)[::-1].T                         # F×τ, newest lag first
    return pd.DataFrame(
        mean,
        index=pd.Index(list(feature_names), name="feature"),
        columns=[f"lag_{j}" for j in range(tau)],
    )


def causal_gap(report: pd.DataFrame, causal: Sequence[int], spurious: Sequence[int]) -> float:
    """Mean mask over causal feature rows minus mean over spurious rows."""
    values = report.to_numpy()
    return float(values[list(causal)].mean() - values[list(spurious)].mean())


def window_masks(net: CausalMaskNet, x: np.ndarray, batch_size: int = 256) -> Iterator[np.ndarray]:
    """Masks for a stack of windows (W×N×τ×F), batch by batch."""
    for start in range(0, x.shape[0], batch_size):
        yield generate_mask(net, x[start:start + batch_size]).data
