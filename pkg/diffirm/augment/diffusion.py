"""
Environment augmentor G_ψ: a DDPM over node features with a GCN denoiser.

The forward chain corrupts X with Gaussian noise following a linear α
schedule; the learned reverse chain pulls a partially noised copy back toward
the data manifold. Partial noising (default l_aug = L_diff / 4) followed by
the reverse chain gives a new "environment" version X̂ of the same instance.

Everything is pathwise differentiable in ψ: noise draws are constants on the
tape, so the ascent on L_aug in the trainer flows through every denoise mean.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from diffirm.core.tensor import (
    Tensor,
    affine,
    as_tensor,
    concat,
    elementwise,
    mse_loss,
    reshape,
    scale,
)
from diffirm.errors import ContractError, DimensionError
from diffirm.graph import gcn_layer, propagate
from diffirm.models.config import DiffusionConfig

Params = dict[str, Tensor]


# =============================================
# NOISE SCHEDULE
# =============================================

@dataclass(frozen=True)
class NoiseSchedule:
    """alphas[l-1] = α^(l); alpha_bars[l-1] = ∏_{j≤l} (1 − α^(j))."""

    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def l_diff(self) -> int:
        return len(self.alphas)

    def alpha(self, l: int) -> float:
        self._check_step(l)
        return float(self.alphas[l - 1])

    def alpha_bar(self, l: int) -> float:
        self._check_step(l)
        return float(self.alpha_bars[l - 1])

    def _check_step(self, l: int) -> None:
        if not 1 <= l <= self.l_diff:
            raise ContractError(f"diffusion step {l} outside 1..{self.l_diff}")


def make_schedule(kind: str = "linear", alpha_min: float = 1e-4, alpha_max: float = 0.1,
                  l_diff: int = 100) -> NoiseSchedule:
    if kind != "linear":
        raise ContractError(f"unknown schedule kind {kind!r}")
    if not (0.0 < alpha_min <= alpha_max < 1.0):
        raise ContractError(f"need 0 < alpha_min <= alpha_max < 1, got {alpha_min}, {alpha_max}")
    if l_diff < 1:
        raise ContractError(f"l_diff must be >= 1, got {l_diff}")
    alphas = np.linspace(alpha_min, alpha_max, l_diff) if l_diff > 1 else np.array([alpha_min])
    return NoiseSchedule(alphas, np.cumprod(1.0 - alphas))


def schedule_from_config(cfg: DiffusionConfig) -> NoiseSchedule:
    return make_schedule("linear", cfg.alpha_min, cfg.alpha_max, cfg.l_diff)


# =============================================
# FORWARD CHAIN
# =============================================

def forward_diffuse(x0, l: int, sched: NoiseSchedule, rng: np.random.Generator) -> Tensor:
    """One draw from N(√ᾱ_l · x0, (1 − ᾱ_l) I)."""
    x0 = as_tensor(x0)
    a_bar = sched.alpha_bar(l)
    noise = rng.standard_normal(x0.shape) * np.sqrt(1.0 - a_bar)
    return elementwise(scale(x0, np.sqrt(a_bar)), Tensor(noise), "add")


def forward_diffuse_stepwise(x0, l: int, sched: NoiseSchedule, rng: np.random.Generator) -> np.ndarray:
    """l single-step transitions x ← √(1 − α) x + √α ε."""
    sched.alpha_bar(l)
    x = np.array(as_tensor(x0).data)
    for step in range(1, l + 1):
        a = sched.alpha(step)
        x = np.sqrt(1.0 - a) * x + np.sqrt(a) * rng.standard_normal(x.shape)
    return x


def step_embedding(l: int, d_emb: int) -> np.ndarray:
    """Sinusoidal embedding: [2i] = sin(l / 10000^(2i/d)), [2i+1] = cos(...)."""
    if d_emb < 2 or d_emb % 2:
        raise ContractError(f"step embedding dimension must be even, got {d_emb}")
    freqs = 10000.0 ** (np.arange(0, d_emb, 2) / d_emb)
    emb = np.empty(d_emb)
    emb[0::2] = np.sin(l / freqs)
    emb[1::2] = np.cos(l / freqs)
    return emb


# =============================================
# DENOISER
# =============================================

@dataclass(frozen=True)
class DenoiserNet:
    """Two-layer GCN predicting the noise ε̂ at step l.

    Per node the input is the flattened τ·F history concatenated with the step
    embedding; the output has the same τ·F width. μ_ψ is recovered from ε̂.
    """

    tau: int
    n_features: int
    d_emb: int = 16
    hidden: int = 32
    params: Params = field(default_factory=dict)

    @classmethod
    def init(cls, tau: int, n_features: int, d_emb: int = 16, hidden: int = 32, seed: int = 0) -> DenoiserNet:
        rng = np.random.default_rng(seed)
        width = tau * n_features

        def glorot(fan_in, fan_out):
            s = np.sqrt(6.0 / (fan_in + fan_out))
            return Tensor(rng.uniform(-s, s, (fan_in, fan_out)), requires_grad=True)

        params = {
            "gc1.w": glorot(width + d_emb, hidden),
            "gc2.w": glorot(hidden, width),
            "gc2.b": Tensor(np.zeros(width), requires_grad=True),
        }
        return cls(tau, n_features, d_emb, hidden, params)

    @classmethod
    def from_config(cls, cfg: DiffusionConfig, tau: int, n_features: int, seed: int = 0) -> DenoiserNet:
        return cls.init(tau, n_features, cfg.d_emb, cfg.hidden, seed)

    def with_params(self, params: Params) -> DenoiserNet:
        return DenoiserNet(self.tau, self.n_features, self.d_emb, self.hidden, params)

    def predict_noise(self, x_l, l, a_hat) -> Tensor:
        """ε̂_ψ(x_l, l, Â); l is one step or one step per batch sample."""
        x_l = as_tensor(x_l)
        a_hat = as_tensor(a_hat)
        single = x_l.ndim == 3
        if single:
            x_l = reshape(x_l, (1, *x_l.shape))
        if x_l.ndim != 4 or x_l.shape[2:] != (self.tau, self.n_features):
            raise DimensionError(f"denoiser expects (·, N, {self.tau}, {self.n_features}), got {x_l.shape}")
        b, n = x_l.shape[:2]
        width = self.tau * self.n_features

        steps = np.broadcast_to(np.asarray(l), (b,))
        emb = np.stack([step_embedding(int(s), self.d_emb) for s in steps])
        emb = np.broadcast_to(emb[:, None, :], (b, n, self.d_emb))
        h = concat([reshape(x_l, (b, n, width)), Tensor(emb)], axis=2)
        h = gcn_layer(h, a_hat, self.params["gc1.w"], "relu")
        h = reshape(propagate(h, a_hat), (b * n, self.hidden))
        eps = reshape(affine(h, self.params["gc2.w"], self.params["gc2.b"]), (b, n, self.tau, self.n_features))
        return reshape(eps, eps.shape[1:]) if single else eps

    def mean(self, x_l, l: int, a_hat, sched: NoiseSchedule) -> Tensor:
        """μ_ψ = (x_l − α/√(1 − ᾱ_l) · ε̂) / √(1 − α)."""
        x_l = as_tensor(x_l)
        a, a_bar = sched.alpha(l), sched.alpha_bar(l)
        eps = self.predict_noise(x_l, l, a_hat)
        mixed = elementwise(x_l, scale(eps, a / np.sqrt(1.0 - a_bar)), "sub")
        return scale(mixed, 1.0 / np.sqrt(1.0 - a))


def denoise_step(x_l, l: int, net, a_hat, sched: NoiseSchedule, rng: np.random.Generator) -> Tensor:
    """Draw from N(μ_ψ(x_l, l, Â), α^(l) I); the final step (l = 1) is noiseless.

    `net` is anything exposing `mean(x_l, l, a_hat, sched)`.
    """
    mu = net.mean(x_l, l, a_hat, sched)
    if l == 1:
        return mu
    noise = rng.standard_normal(mu.shape) * np.sqrt(sched.alpha(l))
    return elementwise(mu, Tensor(noise), "add")


def denoising_loss(net: DenoiserNet, x0, a_hat, sched: NoiseSchedule, rng: np.random.Generator) -> Tensor:
    """DDPM noise-prediction MSE with one uniformly drawn step per sample."""
    x0 = np.asarray(as_tensor(x0).data)
    if x0.ndim == 3:
        x0 = x0[None]
    if x0.shape[0] == 0:
        raise ContractError("denoising_loss on an empty batch")
    b = x0.shape[0]
    steps = rng.integers(1, sched.l_diff + 1, size=b)
    eps = rng.standard_normal(x0.shape)
    a_bar = sched.alpha_bars[steps - 1].reshape(b, 1, 1, 1)
    x_l = np.sqrt(a_bar) * x0 + np.sqrt(1.0 - a_bar) * eps
    return mse_loss(net.predict_noise(x_l, steps, a_hat), eps)


# =============================================
# ENVIRONMENT SAMPLING
# =============================================

@dataclass(frozen=True)
class AugmentBatch:
    """K environment versions of one input (or batch), plus the depth used."""

    x_hat: list[Tensor]
    l_aug: int

    def __post_init__(self):
        if not self.x_hat:
            raise ContractError("an augment batch needs at least one environment")

    @property
    def k(self) -> int:
        return len(self.x_hat)


def sample_environment(x, a_hat, net, sched: NoiseSchedule, l_aug: int, rng: np.random.Generator) -> Tensor:
    """Noise x to step l_aug, then run the reverse chain l_aug → 1."""
    h = forward_diffuse(x, l_aug, sched, rng)
    for l in range(l_aug, 0, -1):
        h = denoise_step(h, l, net, a_hat, sched, rng)
    return h


def sample_environments(x, a_hat, net, sched: NoiseSchedule, l_aug: int,
                        rngs: list[np.random.Generator]) -> AugmentBatch:
    """One environment per generator; callers derive the generators from the run seed."""
    return AugmentBatch([sample_environment(x, a_hat, net, sched, l_aug, rng) for rng in rngs], l_aug)
