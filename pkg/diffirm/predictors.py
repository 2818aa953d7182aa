"""
The prediction model f_θ with interchangeable backbones.

All backbones map X (N×τ×F, or a batch B×N×τ×F) to Ŷ (N×τ′ / B×N×τ′):

- linear      per-node affine map of the flattened history
- mlp         per-node two-layer network of the flattened history
- stgcn_lite  GCN per time step, gated causal temporal convolution, affine head

Histories are flattened lag-major: entry 0 is channel 0 of the most recent
step, so a linear weight column [1, 0, ..., 0] copies the last observation.
"""
from __future__ import annotations

import numpy as np

from diffirm.core.tensor import (
    Tensor,
    activation,
    affine,
    as_tensor,
    concat,
    elementwise,
    permute,
    reshape,
    scale,
    sigmoid,
    stack,
    take,
)
from diffirm.errors import DimensionError
from diffirm.graph import adaptive_adjacency, gcn_layer, init_adaptive_params
from diffirm.models.config import PredictorSpec

Params = dict[str, Tensor]


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-s, s, (fan_in, fan_out)), requires_grad=True)


def _zeros(n: int) -> Tensor:
    return Tensor(np.zeros(n), requires_grad=True)


def init_params(spec: PredictorSpec, seed: int) -> Params:
    """Glorot-uniform weights, zero biases; deterministic in seed."""
    rng = np.random.default_rng(seed)
    flat = spec.tau * spec.n_features
    if spec.backbone == "linear":
        return {"head.w": _glorot(rng, flat, spec.horizon), "head.b": _zeros(spec.horizon)}
    if spec.backbone == "mlp":
        return {
            "hidden.w": _glorot(rng, flat, spec.hidden),
            "hidden.b": _zeros(spec.hidden),
            "head.w": _glorot(rng, spec.hidden, spec.horizon),
            "head.b": _zeros(spec.horizon),
        }
    h = spec.hidden
    params = {
        "gcn.w": _glorot(rng, spec.n_features, h),
        "tcn.w": _glorot(rng, spec.kernel * h, 2 * h),
        "tcn.b": _zeros(2 * h),
        "head.w": _glorot(rng, spec.tau * h, spec.horizon),
        "head.b": _zeros(spec.horizon),
    }
    if spec.adaptive:
        params.update({f"adp.{k}": v for k, v in init_adaptive_params(spec.n_features, spec.adaptive_dim, rng).items()})
    return params


def _flatten_history(x: Tensor, tau: int) -> Tensor:
    """B×N×τ×F -> (B·N)×(τ·F), most recent step first."""
    b, n, _, f = x.shape
    newest_first = take(x, (slice(None), slice(None), np.arange(tau - 1, -1, -1)))
    return reshape(newest_first, (b * n, tau * f))


def _temporal_conv(h: Tensor, params: Params, kernel: int) -> Tensor:
    """Causal gated conv over axis 2 of B×N×τ×d: P ⊙ σ(Q)."""
    b, n, tau, d = h.shape
    if kernel > 1:
        pad = Tensor(np.zeros((b, n, kernel - 1, d)))
        h = concat([pad, h], axis=2)
    taps = [take(h, (slice(None), slice(None), slice(j, j + tau))) for j in range(kernel)]
    stacked = reshape(concat(taps, axis=3), (b * n * tau, kernel * d))
    pq = affine(stacked, params["tcn.w"], params["tcn.b"])
    width = pq.shape[1] // 2
    p = take(pq, (slice(None), slice(0, width)))
    q = take(pq, (slice(None), slice(width, 2 * width)))
    return reshape(elementwise(p, sigmoid(q), "mul"), (b, n, tau, width))


def _spatial(x: Tensor, a_hat: Tensor, params: Params, spec: PredictorSpec) -> Tensor:
    """GCN applied to every time step: B×N×τ×F -> B×N×τ×hidden."""
    b, n, tau, f = x.shape
    if not spec.adaptive:
        per_step = reshape(permute(x, (0, 2, 1, 3)), (b * tau, n, f))
        h = gcn_layer(per_step, a_hat, params["gcn.w"], spec.activation)
        return permute(reshape(h, (b, tau, n, spec.hidden)), (0, 2, 1, 3))

    adp = {k[len("adp."):]: v for k, v in params.items() if k.startswith("adp.")}
    samples = []
    for i in range(b):
        xi = take(x, i)                                   # N×τ×F
        summary = scale(xi.sum(axis=1), 1.0 / tau)        # N×F
        a_eff = elementwise(a_hat, scale(adaptive_adjacency(summary, adp), 1.0 / n), "add")
        steps = permute(xi, (1, 0, 2))                    # τ×N×F
        samples.append(permute(gcn_layer(steps, a_eff, params["gcn.w"], spec.activation), (1, 0, 2)))
    return stack(samples, axis=0)


def predict(spec: PredictorSpec, params: Params, x, a_hat) -> Tensor:
    """f_θ(X); returns N×τ′ for a single window or B×N×τ′ for a batch."""
    x = as_tensor(x)
    a_hat = as_tensor(a_hat)
    single = x.ndim == 3
    if single:
        x = reshape(x, (1, *x.shape))
    if x.ndim != 4 or x.shape[1:] != (spec.n_nodes, spec.tau, spec.n_features):
        raise DimensionError(
            f"{spec.backbone}: expected (·, {spec.n_nodes}, {spec.tau}, {spec.n_features}), got {x.shape}"
        )
    b, n = x.shape[0], spec.n_nodes

    if spec.backbone == "linear":
        out = affine(_flatten_history(x, spec.tau), params["head.w"], params["head.b"])
    elif spec.backbone == "mlp":
        hidden = activation(affine(_flatten_history(x, spec.tau), params["hidden.w"], params["hidden.b"]), spec.activation)
        out = affine(hidden, params["head.w"], params["head.b"])
    else:
        h = _spatial(x, a_hat, params, spec)
        h = _temporal_conv(h, params, spec.kernel)
        out = affine(reshape(h, (b * n, spec.tau * spec.hidden)), params["head.w"], params["head.b"])

    out = reshape(out, (b, n, spec.horizon))
    return reshape(out, (n, spec.horizon)) if single else out
