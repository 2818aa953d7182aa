"""
Adam with bias correction, over named parameter dicts.

Parameters are immutable Tensors, so a step returns a fresh dict of leaves
instead of writing in place. The trainer relies on this to compute every
group's update from the same pre-update snapshot and swap them all at once.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from diffirm.core.tensor import Tensor
from diffirm.errors import DimensionError

Params = dict[str, Tensor]


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros(cls, params: Params, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
        return cls(
            lr=lr, beta1=beta1, beta2=beta2, eps=eps, t=0,
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )

    def arrays(self, prefix: str) -> dict[str, np.ndarray]:
        """Flatten to named arrays for checkpoints."""
        out = {f"{prefix}.t": np.array(self.t)}
        out.update({f"{prefix}.m.{k}": v for k, v in self.m.items()})
        out.update({f"{prefix}.v.{k}": v for k, v in self.v.items()})
        return out

    def load_arrays(self, prefix: str, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays[f"{prefix}.t"])
        for k in self.m:
            self.m[k] = np.array(arrays[f"{prefix}.m.{k}"], dtype=np.float64)
            self.v[k] = np.array(arrays[f"{prefix}.v.{k}"], dtype=np.float64)


def adam_step(params: Params, grads: dict[str, np.ndarray], state: AdamState) -> Params:
    """One Adam update; returns new leaf tensors and advances `state`."""
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise DimensionError(f"adam_step: grad for {name} has shape {grads[name].shape}, param {p.shape}")
        if state.m[name].shape != p.shape:
            raise DimensionError(f"adam_step: state for {name} has shape {state.m[name].shape}, param {p.shape}")

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** state.t
    correction2 = 1.0 - b2 ** state.t

    updated: Params = {}
    for name, p in params.items():
        g = grads[name]
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / correction1
        v_hat = state.v[name] / correction2
        updated[name] = Tensor(p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps), requires_grad=True)
    return updated


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Rescale so the joint L2 norm is at most max_norm; returns (grads, original norm)."""
    norm = global_norm(grads)
    if max_norm <= 0 or norm <= max_norm:
        return grads, norm
    factor = max_norm / norm
    return {k: g * factor for k, g in grads.items()}, norm
