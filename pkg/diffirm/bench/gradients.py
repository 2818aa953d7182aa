"""
Finite-difference sweep over every differentiable op and network.

Each case builds a scalar function of named parameters from a seeded
generator; non-scalar outputs are reduced against a fixed random projection
so every output entry contributes to the checked gradient.
"""
from __future__ import annotations

import logging
from typing import Callable

import numpy as np
import pandas as pd

from diffirm.augment.diffusion import DenoiserNet
from diffirm.augment.mask import CausalMaskNet, combine, generate_mask, ratio_regularizer
from diffirm.augment.perturb import PerturbationNet, perturb
from diffirm.core.gradcheck import grad_check_params
from diffirm.core.tensor import (
    Tensor,
    activation,
    affine,
    concat,
    elementwise,
    matmul,
    mse_loss,
    permute,
    reduce_mean,
    reduce_sum,
    reshape,
    scale,
    shift,
    square,
    stack,
    take,
)
from diffirm.graph import (
    adaptive_adjacency,
    gcn_layer,
    init_adaptive_params,
    normalize_adjacency,
    path_graph,
    propagate,
)
from diffirm.models.config import PredictorSpec
from diffirm.predictors import init_params, predict

logger = logging.getLogger("diffirm.bench")

Params = dict[str, Tensor]
Case = Callable[[np.random.Generator], tuple[Callable[[Params], Tensor], Params]]

_N, _TAU, _F = 3, 3, 2


def _project(out: Tensor, w: np.ndarray) -> Tensor:
    return reduce_sum(elementwise(out, Tensor(w), "mul"))


def _leaf(rng, *shape, low=None, high=None) -> Tensor:
    data = rng.standard_normal(shape) if low is None else rng.uniform(low, high, shape)
    return Tensor(data, requires_grad=True)


def _unary(op) -> Case:
    def build(rng):
        x = _leaf(rng, 3, 4)
        w = rng.standard_normal(op(Tensor(x.data)).shape)
        return (lambda ps: _project(op(ps["x"]), w)), {"x": x}
    return build


def _binary(op) -> Case:
    def build(rng):
        a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
        w = rng.standard_normal((3, 4))
        return (lambda ps: _project(elementwise(ps["a"], ps["b"], op), w)), {"a": a, "b": b}
    return build


def _matmul(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 2)
    w = rng.standard_normal((3, 2))
    return (lambda ps: _project(matmul(ps["a"], ps["b"]), w)), {"a": a, "b": b}


def _affine(rng):
    x, w_, b = _leaf(rng, 5, 3), _leaf(rng, 3, 2), _leaf(rng, 2)
    w = rng.standard_normal((5, 2))
    return (lambda ps: _project(affine(ps["x"], ps["w"], ps["b"]), w)), {"x": x, "w": w_, "b": b}


def _concat(rng):
    a, b = _leaf(rng, 2, 3), _leaf(rng, 2, 2)
    w = rng.standard_normal((2, 5))
    return (lambda ps: _project(concat([ps["a"], ps["b"]], axis=1), w)), {"a": a, "b": b}


def _stack(rng):
    a, b = _leaf(rng, 2, 3), _leaf(rng, 2, 3)
    w = rng.standard_normal((2, 2, 3))
    return (lambda ps: _project(stack([ps["a"], ps["b"]], axis=1), w)), {"a": a, "b": b}


def _mse(rng):
    pred, target = _leaf(rng, 4, 3), rng.standard_normal((4, 3))
    return (lambda ps: mse_loss(ps["pred"], target)), {"pred": pred}


def _a_hat() -> Tensor:
    return normalize_adjacency(path_graph(_N))


def _propagate(rng):
    h = _leaf(rng, 2, _N, 3)
    w = rng.standard_normal((2, _N, 3))
    a_hat = _a_hat()
    return (lambda ps: _project(propagate(ps["h"], a_hat), w)), {"h": h}


def _gcn(rng):
    h, w_ = _leaf(rng, 2, _N, 3), _leaf(rng, 3, 4)
    w = rng.standard_normal((2, _N, 4))
    a_hat = _a_hat()
    return (lambda ps: _project(gcn_layer(ps["h"], a_hat, ps["w"], "tanh"), w)), {"h": h, "w": w_}


def _adaptive(rng):
    x = rng.standard_normal((_N, _F))
    params = init_adaptive_params(_F, 3, rng)
    params["b"] = Tensor(0.5, requires_grad=True)
    w = rng.standard_normal((_N, _N))
    return (lambda ps: _project(adaptive_adjacency(Tensor(x), ps), w)), params


def _backbone(backbone: str, adaptive: bool = False) -> Case:
    def build(rng):
        spec = PredictorSpec(backbone=backbone, hidden=3, kernel=2, tau=_TAU, horizon=2,
                             n_features=_F, n_nodes=_N, activation="tanh",
                             adaptive=adaptive, adaptive_dim=2)
        params = init_params(spec, int(rng.integers(2 ** 31)))
        # random biases so no gate or head starts at a symmetric point
        params = {k: Tensor(p.data + 0.1 * rng.standard_normal(p.shape), requires_grad=True)
                  for k, p in params.items()}
        x = rng.standard_normal((2, _N, _TAU, _F))
        y = rng.standard_normal((2, _N, 2))
        a_hat = _a_hat()
        return (lambda ps: mse_loss(predict(spec, ps, x, a_hat), y)), params
    return build


def _denoiser(rng):
    net = DenoiserNet.init(2, _F, d_emb=4, hidden=3, seed=int(rng.integers(2 ** 31)))
    x = rng.standard_normal((2, _N, 2, _F))
    w = rng.standard_normal(x.shape)
    a_hat = _a_hat()
    return (lambda ps: _project(net.with_params(ps).predict_noise(x, [3, 7], a_hat), w)), net.params


def _mask(rng):
    net = CausalMaskNet.init(_TAU, _F, hidden=4, seed=int(rng.integers(2 ** 31)))
    x = rng.standard_normal((2, _N, _TAU, _F))
    w = rng.standard_normal(x.shape)
    return (lambda ps: _project(generate_mask(net.with_params(ps), x), w)), net.params


def _perturbation(rng):
    net = PerturbationNet.init(_TAU, _F, hidden=4, seed=int(rng.integers(2 ** 31)))
    x = rng.standard_normal((_N, _TAU, _F))
    w = rng.standard_normal(x.shape)
    noise_seed = int(rng.integers(2 ** 31))
    return (lambda ps: _project(perturb(net.with_params(ps), x, np.random.default_rng(noise_seed)), w)), net.params


def _combine(rng):
    params = {
        "x": _leaf(rng, _N, _TAU, _F),
        "x_hat": _leaf(rng, _N, _TAU, _F),
        "m": _leaf(rng, _N, _TAU, _F, low=0.1, high=0.9),
    }
    w = rng.standard_normal((_N, _TAU, _F))
    return (lambda ps: _project(combine(ps["x"], ps["x_hat"], ps["m"]), w)), params


def _ratio(rng):
    m = _leaf(rng, _N, _TAU, _F, low=0.1, high=0.9)
    return (lambda ps: ratio_regularizer(ps["m"], 0.3)), {"m": m}


CASES: dict[str, Case] = {
    "matmul": _matmul,
    "add": _binary("add"),
    "sub": _binary("sub"),
    "mul": _binary("mul"),
    "scale": _unary(lambda x: scale(x, -1.7)),
    "shift": _unary(lambda x: shift(x, 0.4)),
    "square": _unary(square),
    "relu": _unary(lambda x: activation(x, "relu")),
    "sigmoid": _unary(lambda x: activation(x, "sigmoid")),
    "tanh": _unary(lambda x: activation(x, "tanh")),
    "sum": _unary(lambda x: reduce_sum(x, axis=1)),
    "mean": _unary(lambda x: reduce_mean(x, axis=0)),
    "reshape": _unary(lambda x: reshape(x, (2, 6))),
    "permute": _unary(lambda x: permute(x, (1, 0))),
    "take": _unary(lambda x: take(x, (slice(None), [0, 2, 2]))),
    "concat": _concat,
    "stack": _stack,
    "affine": _affine,
    "mse_loss": _mse,
    "propagate": _propagate,
    "gcn_layer": _gcn,
    "adaptive_adjacency": _adaptive,
    "linear": _backbone("linear"),
    "mlp": _backbone("mlp"),
    "stgcn_lite": _backbone("stgcn_lite"),
    "stgcn_lite_adaptive": _backbone("stgcn_lite", adaptive=True),
    "denoiser": _denoiser,
    "mask": _mask,
    "perturbation": _perturbation,
    "combine": _combine,
    "ratio_regularizer": _ratio,
}


def gradient_suite(instances: int = 20, seed: int = 0, ops=None) -> pd.DataFrame:
    """Max relative finite-difference error per op over seeded random instances."""
    rows = []
    for name in ops or CASES:
        build = CASES[name]
        worst = 0.0
        for i in range(instances):
            f, params = build(np.random.default_rng([seed, i]))
            worst = max(worst, grad_check_params(f, params))
        logger.debug("gradcheck %s: %.3e", name, worst)
        rows.append({"op": name, "instances": instances, "max_error": worst})
    return pd.DataFrame(rows, columns=["op", "instances", "max_error"])
