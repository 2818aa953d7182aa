"""
Adversarial perturbation augmentor used by the AdvAug variant.

A perceptron reads each node's history together with a fresh noise draw and
emits an additive perturbation, X̂ = X + δ_ψ(X, z). It stands in for the
diffusion augmentor and is trained by ascent on the augmentation loss.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from diffirm.core.tensor import Tensor, activation, affine, as_tensor, concat, elementwise, reshape
from diffirm.errors import DimensionError

Params = dict[str, Tensor]


@dataclass(frozen=True)
class PerturbationNet:
    tau: int
    n_features: int
    hidden: int = 32
    params: Params = field(default_factory=dict)

    @classmethod
    def init(cls, tau: int, n_features: int, hidden: int = 32, seed: int = 0) -> PerturbationNet:
        rng = np.random.default_rng(seed)
        width = tau * n_features
        s_in = np.sqrt(6.0 / (2 * width + hidden))
        s_out = np.sqrt(6.0 / (hidden + width))
        return cls(tau, n_features, hidden, {
            "hidden.w": Tensor(rng.uniform(-s_in, s_in, (2 * width, hidden)), requires_grad=True),
            "hidden.b": Tensor(np.zeros(hidden), requires_grad=True),
            "out.w": Tensor(rng.uniform(-s_out, s_out, (hidden, width)), requires_grad=True),
            "out.b": Tensor(np.zeros(width), requires_grad=True),
        })

    def with_params(self, params: Params) -> PerturbationNet:
        return PerturbationNet(self.tau, self.n_features, self.hidden, params)


def perturb(net: PerturbationNet, x, rng: np.random.Generator) -> Tensor:
    x = as_tensor(x)
    if x.ndim not in (3, 4) or x.shape[-2:] != (net.tau, net.n_features):
        raise DimensionError(f"perturbation net expects (…, N, {net.tau}, {net.n_features}), got {x.shape}")
    width = net.tau * net.n_features
    rows = x.size // width
    flat = reshape(x, (rows, width))
    z = Tensor(rng.standard_normal((rows, width)))
    h = activation(affine(concat([flat, z], axis=1), net.params["hidden.w"], net.params["hidden.b"]), "tanh")
    delta = affine(h, net.params["out.w"], net.params["out.b"])
    return elementwise(x, reshape(delta, x.shape), "add")
