"""
Training objectives and evaluation metrics.

Risks are passed around as closures `risk(params) -> scalar Tensor` so the
same penalty code serves the predictors, the baselines and hand-built
one-parameter checks. Squared-gradient penalties (first-order diffIRM and
IRMv1) return their value together with their θ-gradient, obtained through a
Hessian-vector product instead of differentiating a gradient on the tape.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from diffirm.augment.mask import combine
from diffirm.core.gradcheck import fresh_params, gradients, squared_grad_norm_and_gradient
from diffirm.core.optim import AdamState, adam_step
from diffirm.core.tensor import (
    Tensor,
    as_tensor,
    elementwise,
    mse_loss,
    reduce_mean,
    relu,
    scale,
    square,
    stack,
    take,
)
from diffirm.errors import ConfigError, ContractError
from diffirm.models.config import PredictorSpec
from diffirm.models.reports import LossReport, Metrics
from diffirm.predictors import predict

Params = dict[str, Tensor]
RiskFn = Callable[[Params], Tensor]


# =============================================
# AUGMENTATION LOSS
# =============================================

def augmented_inputs(x, x_hats: Sequence, m_cau) -> list[Tensor]:
    """X̃^(k) = X ⊙ M_cau + X̂^(k) ⊙ (1 − M_cau) for every environment draw."""
    if not x_hats:
        raise ContractError("at least one environment draw is required")
    return [combine(x, x_hat, m_cau) for x_hat in x_hats]


def environment_risks(spec: PredictorSpec, theta: Params, x_tildes: Sequence, y, a_hat) -> Tensor:
    """Vector of ℓ(f_θ(X̃^(k)), Y), one entry per environment."""
    if not x_tildes:
        raise ContractError("augmentation_loss needs at least one environment")
    if as_tensor(x_tildes[0]).shape[0] == 0:
        raise ContractError("augmentation_loss on an empty batch")
    return stack([mse_loss(predict(spec, theta, xt, a_hat), y) for xt in x_tildes])


def mean_risk(risks: Tensor, x_tildes: Sequence) -> Tensor:
    """Mean of the environment risks.

    When every X̃^(k) holds the same values the mean is the first risk itself,
    so a pinned all-ones mask gives exactly the single-environment loss.
    """
    first = as_tensor(x_tildes[0]).data
    if all(np.array_equal(first, as_tensor(xt).data) for xt in x_tildes[1:]):
        return take(risks, 0)
    return reduce_mean(risks)


def augmentation_loss(spec: PredictorSpec, theta: Params, x_tildes: Sequence, y, a_hat) -> Tensor:
    """Mean over environments of ℓ(f_θ(X̃^(k)), Y)."""
    return mean_risk(environment_risks(spec, theta, x_tildes, y, a_hat), x_tildes)


def env_risk_fns(spec: PredictorSpec, inputs: Sequence, targets: Sequence, a_hat) -> list[RiskFn]:
    """One risk closure per environment; inputs are treated as constants."""
    consts = [Tensor(as_tensor(x).data) for x in inputs]
    return [
        (lambda params, x=x, y=y: mse_loss(predict(spec, params, x, a_hat), y))
        for x, y in zip(consts, targets)
    ]


# =============================================
# INVARIANCE PENALTIES
# =============================================

def gradient_penalty(risks: Sequence[RiskFn], params: Params, h: float = 1e-4,
                     reduce: str = "mean") -> tuple[float, dict[str, np.ndarray], list[float]]:
    """Σ or mean over environments of ‖∇θ risk_e‖², its θ-gradient, and the per-env values."""
    if not risks:
        raise ContractError("gradient_penalty needs at least one environment")
    values, total = [], {k: np.zeros_like(p.data) for k, p in params.items()}
    for risk in risks:
        value, grad = squared_grad_norm_and_gradient(risk, params, h)
        values.append(value)
        for k in total:
            total[k] = total[k] + grad[k]
    factor = 1.0 / len(risks) if reduce == "mean" else 1.0
    return factor * float(np.sum(values)), {k: factor * g for k, g in total.items()}, values


def invariance_penalty_firstorder(spec: PredictorSpec, theta: Params, x_tildes: Sequence, y, a_hat,
                                  h: float = 1e-4) -> tuple[float, dict[str, np.ndarray]]:
    """r̂(θ) = mean_k ‖∇θ ℓ(f_θ(X̃^(k)), Y)‖², with X̃ held constant."""
    risks = env_risk_fns(spec, x_tildes, [y] * len(x_tildes), a_hat)
    value, grad, _ = gradient_penalty(risks, theta, h, reduce="mean")
    return value, grad


@dataclass
class EnvPredictorBank:
    """Per-environment predictors θ_k fitted to their own augmented environment."""

    thetas: list[Params]
    states: list[AdamState]
    last_refresh: int = -1

    @classmethod
    def from_theta(cls, theta: Params, k: int, lr: float = 1e-3) -> EnvPredictorBank:
        thetas = [fresh_params(theta) for _ in range(k)]
        return cls(thetas, [AdamState.zeros(t, lr=lr) for t in thetas])

    @property
    def k(self) -> int:
        return len(self.thetas)

    def is_stale(self, iteration: int, refresh_every: int) -> bool:
        return self.last_refresh < 0 or iteration - self.last_refresh >= refresh_every

    def refresh(self, spec: PredictorSpec, x_tildes: Sequence, y, a_hat, steps: int, iteration: int) -> None:
        """S Adam steps of θ_k on environment k, warm-started from the previous θ_k."""
        if len(x_tildes) != self.k:
            raise ContractError(f"bank holds {self.k} predictors but got {len(x_tildes)} environments")
        for idx, risk in enumerate(env_risk_fns(spec, x_tildes, [y] * self.k, a_hat)):
            theta_k = self.thetas[idx]
            for _ in range(steps):
                _, grads = gradients(risk, theta_k)
                theta_k = adam_step(theta_k, grads, self.states[idx])
            self.thetas[idx] = theta_k
        self.last_refresh = iteration

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"bank.last_refresh": np.array(self.last_refresh)}
        for idx, (theta_k, state) in enumerate(zip(self.thetas, self.states)):
            out.update({f"bank.{idx}.{name}": p.data for name, p in theta_k.items()})
            out.update(state.arrays(f"bankopt.{idx}"))
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.last_refresh = int(arrays["bank.last_refresh"])
        for idx, theta_k in enumerate(self.thetas):
            self.thetas[idx] = {
                name: Tensor(arrays[f"bank.{idx}.{name}"], requires_grad=True) for name in theta_k
            }
            self.states[idx].load_arrays(f"bankopt.{idx}", arrays)


def invariance_penalty_exact(spec: PredictorSpec, theta: Params, bank: EnvPredictorBank,
                             x_tildes: Sequence, y, a_hat) -> Tensor:
    """mean_k [ℓ(f_θ(X̃^(k)), Y) − ℓ(f_θk(X̃^(k)), Y)]; θ_k enter as constants."""
    if len(x_tildes) != bank.k:
        raise ContractError(f"bank holds {bank.k} predictors but got {len(x_tildes)} environments")
    gaps = []
    for xt, theta_k in zip(x_tildes, bank.thetas):
        xt = Tensor(as_tensor(xt).data)
        frozen = {name: Tensor(p.data) for name, p in theta_k.items()}
        shared = mse_loss(predict(spec, theta, xt, a_hat), y)
        own = mse_loss(predict(spec, frozen, xt, a_hat), y)
        gaps.append(elementwise(shared, own, "sub"))
    return reduce_mean(stack(gaps))


def total_loss(augmentation: float, penalty: float = 0.0, lam: float = 0.0,
               regularizer: float = 0.0, regularizer_weight: float = 0.0, **extra) -> LossReport:
    """L = L_aug + λ r(θ) (+ w · L_reg), as a report of its components."""
    if lam < 0:
        raise ContractError(f"penalty weight must be non-negative, got {lam}")
    return LossReport(
        augmentation=float(augmentation), penalty=float(penalty), lam=float(lam),
        regularizer=float(regularizer), regularizer_weight=float(regularizer_weight), **extra,
    )


# =============================================
# BASELINES
# =============================================

@dataclass
class BaselineTerms:
    """Differentiable part of a baseline objective plus any HVP-based penalty gradient."""

    objective: Tensor
    penalty: float
    env_risks: list[float]
    penalty_grad: dict[str, np.ndarray] | None = field(default=None)


def baseline_loss(method: str, params: Params, risks: Sequence[RiskFn], lam: float = 1.0,
                  rex_form: str = "variance", aware_risks: Sequence[float] | None = None,
                  hvp_step: float = 1e-4) -> BaselineTerms:
    """ERM, IRMv1, REx or InvRat objective over environment risks.

    `params` must be the leaves the risks close over so `objective` can be
    back-propagated into them. For irmv1 the penalty gradient is returned
    separately and must be scaled by λ and added by the caller.
    """
    if method not in ("erm", "erm_ar", "irmv1", "rex", "invrat"):
        raise ConfigError(f"unknown baseline method {method!r}")
    if not risks:
        raise ContractError("baseline_loss needs at least one environment")
    if method not in ("erm", "erm_ar") and len(risks) < 2:
        raise ContractError(f"{method} needs at least two environments, got {len(risks)}")

    per_env = stack([risk(params) for risk in risks])
    env_values = [float(v) for v in per_env.data]
    mean_risk = reduce_mean(per_env)

    if method in ("erm", "erm_ar"):
        return BaselineTerms(mean_risk, 0.0, env_values)

    if method == "irmv1":
        value, grad, _ = gradient_penalty(risks, params, hvp_step, reduce="sum")
        return BaselineTerms(mean_risk, value, env_values, grad)

    if method == "rex":
        if rex_form == "variance":
            penalty = reduce_mean(square(per_env - _broadcast(mean_risk, len(risks))))
            return BaselineTerms(mean_risk + scale(penalty, lam), penalty.item(), env_values)
        if rex_form == "appendix":
            best_idx = int(np.argmin(per_env.data))
            penalty = square(mean_risk)
            return BaselineTerms(take(per_env, best_idx) + scale(penalty, lam), penalty.item(), env_values)
        raise ConfigError(f"unknown rex_form {rex_form!r}")

    # invrat: env-aware risks are constants for θ
    if aware_risks is None or len(aware_risks) != len(risks):
        raise ContractError("invrat needs one env-aware risk per environment")
    gaps = relu(per_env - Tensor(np.asarray(aware_risks, dtype=np.float64)))
    penalty = reduce_mean(gaps)
    return BaselineTerms(mean_risk + scale(penalty, lam), penalty.item(), env_values)


def _broadcast(scalar: Tensor, n: int) -> Tensor:
    return stack([scalar] * n)


def env_one_hot(x, env: int, n_envs: int) -> np.ndarray:
    """Append a one-hot environment code as extra channels of every step."""
    x = np.asarray(as_tensor(x).data)
    code = np.zeros((*x.shape[:-1], n_envs))
    code[..., env] = 1.0
    return np.concatenate([x, code], axis=-1)


# =============================================
# METRICS
# =============================================

def metrics(pred, target, eps: float = 1e-8) -> Metrics:
    """MAE, RMSE and MAPE (percent); MAPE is None when every |target| < eps."""
    p = np.asarray(as_tensor(pred).data, dtype=np.float64)
    y = np.asarray(as_tensor(target).data, dtype=np.float64)
    if p.shape != y.shape:
        raise ContractError(f"metrics shapes {p.shape} and {y.shape} differ")
    if p.size == 0:
        raise ContractError("metrics on an empty prediction set")
    err = p - y
    keep = np.abs(y) >= eps
    mape = float(np.mean(np.abs(err[keep]) / np.abs(y[keep])) * 100.0) if keep.any() else None
    return Metrics(mae=float(np.mean(np.abs(err))), rmse=float(np.sqrt(np.mean(err * err))), mape=mape)
