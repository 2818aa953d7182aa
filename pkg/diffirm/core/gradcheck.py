"""
Finite-difference utilities: gradient checks and Hessian-vector products.

grad_check is the oracle the test suite and the `gradcheck` CLI command use
for every primitive and backbone. hessian_vector_product gives the gradient
of squared-gradient penalties (IRMv1, first-order diffIRM) from two ordinary
backward passes, so the tape never has to differentiate a gradient.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from diffirm.core.tensor import Tensor, backward
from diffirm.errors import ContractError

Params = dict[str, Tensor]


def fresh_params(params: Params) -> Params:
    """New requires_grad leaves holding the same values (clears tape history)."""
    return {k: Tensor(p.data, requires_grad=True) for k, p in params.items()}


def gradients(loss_fn: Callable[[Params], Tensor], params: Params) -> tuple[float, dict[str, np.ndarray]]:
    """Run one forward/backward of loss_fn at params; returns (loss, grads)."""
    leaves = fresh_params(params)
    loss = loss_fn(leaves)
    backward(loss)
    return loss.item(), {k: p.grad.copy() for k, p in leaves.items()}


def grad_check_params(f: Callable[[Params], Tensor], params: Params, h: float = 1e-5) -> float:
    """Max over entries of |g_ad - g_fd| / max(1, |g_fd|), central differences."""
    if not 1e-6 <= h <= 1e-3:
        raise ContractError(f"grad_check step h={h} outside [1e-6, 1e-3]")
    _, analytic = gradients(f, params)

    worst = 0.0
    for name, p in params.items():
        base = p.data
        for idx in np.ndindex(base.shape):
            plus = base.copy()
            minus = base.copy()
            plus[idx] += h
            minus[idx] -= h
            f_plus = f({**params, name: Tensor(plus)}).item()
            f_minus = f({**params, name: Tensor(minus)}).item()
            fd = (f_plus - f_minus) / (2.0 * h)
            err = abs(analytic[name][idx] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    return worst


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """grad_check_params for a single-input function."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    return grad_check_params(lambda ps: f(ps["x"]), {"x": x}, h)


def hessian_vector_product(
    loss_fn: Callable[[Params], Tensor],
    params: Params,
    direction: dict[str, np.ndarray],
    h: float = 1e-4,
) -> dict[str, np.ndarray]:
    """H·v ≈ (∇L(θ + h v) − ∇L(θ − h v)) / 2h, with v normalised to unit length."""
    norm = float(np.sqrt(sum(float(np.sum(d * d)) for d in direction.values())))
    if norm == 0.0:
        return {k: np.zeros_like(p.data) for k, p in params.items()}
    unit = {k: d / norm for k, d in direction.items()}
    plus = {k: Tensor(p.data + h * unit[k]) for k, p in params.items()}
    minus = {k: Tensor(p.data - h * unit[k]) for k, p in params.items()}
    _, g_plus = gradients(loss_fn, plus)
    _, g_minus = gradients(loss_fn, minus)
    return {k: norm * (g_plus[k] - g_minus[k]) / (2.0 * h) for k in params}


def squared_grad_norm_and_gradient(
    loss_fn: Callable[[Params], Tensor],
    params: Params,
    h: float = 1e-4,
) -> tuple[float, dict[str, np.ndarray]]:
    """Returns (‖∇L‖², ∇‖∇L‖²) where the second uses ∇‖g‖² = 2·H·g."""
    _, g = gradients(loss_fn, params)
    value = float(sum(float(np.sum(v * v)) for v in g.values()))
    hg = hessian_vector_product(loss_fn, params, g, h)
    return value, {k: 2.0 * v for k, v in hg.items()}
