"""
Typed configuration models.

Every model forbids unknown keys, so a typo in a run-config file fails at load
time instead of silently training with a default. `config_hash` gives the
short digest embedded in every output file.
"""
from __future__ import annotations

import hashlib
import json
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

METHODS = (
    "diffirm", "advaug", "diffaug", "diffirm_minus",
    "erm", "irmv1", "rex", "invrat", "erm_ar",
)
Method = Literal[
    "diffirm", "advaug", "diffaug", "diffirm_minus",
    "erm", "irmv1", "rex", "invrat", "erm_ar",
]
Activation = Literal["relu", "sigmoid", "tanh", "identity"]


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class PredictorSpec(StrictModel):
    backbone: Literal["linear", "mlp", "stgcn_lite"] = "stgcn_lite"
    hidden: int = Field(16, ge=1, description="hidden width (mlp units / GCN channels)")
    activation: Activation = "relu"
    kernel: int = Field(3, ge=1, description="temporal conv kernel (stgcn_lite)")
    tau: int = Field(3, ge=1)
    horizon: int = Field(3, ge=1, description="τ′, number of future steps")
    n_features: int = Field(1, ge=1)
    n_nodes: int = Field(1, ge=1)
    # stgcn_lite only: add A_adp / N to the static Â
    adaptive: bool = False
    adaptive_dim: int = Field(8, ge=1)


class DiffusionConfig(StrictModel):
    l_diff: int = Field(100, ge=1)
    alpha_min: float = Field(1e-4, gt=0, lt=1)
    # 0.1 puts the terminal cumulative product below 0.01
    alpha_max: float = Field(0.1, gt=0, lt=1)
    l_aug: int | None = Field(None, ge=1, description="partial-noising depth, default l_diff // 4")
    d_emb: int = Field(16, ge=2)
    hidden: int = Field(32, ge=1)
    eta_adv: float = Field(1.0, ge=0, description="weight of the ascent term in ψ's objective")
    denoise_weight: float = Field(1.0, ge=0)

    @model_validator(mode="after")
    def _check(self):
        if self.alpha_min > self.alpha_max:
            raise ValueError("alpha_min must not exceed alpha_max")
        if self.d_emb % 2:
            raise ValueError("d_emb must be even")
        if self.l_aug is not None and self.l_aug > self.l_diff:
            raise ValueError("l_aug must not exceed l_diff")
        return self

    @property
    def augment_depth(self) -> int:
        return self.l_aug if self.l_aug is not None else max(1, self.l_diff // 4)


class LearningRates(StrictModel):
    theta: float = Field(1e-3, gt=0)
    phi: float = Field(1e-3, gt=0)
    psi: float = Field(1e-3, gt=0)
    eta: float = Field(1e-3, gt=0, description="InvRat env-aware predictor")


class SplitSpec(StrictModel):
    """Either fractions summing to 1 or absolute window counts."""

    train: float = 0.6
    val: float = 0.2
    test: float = 0.2
    absolute: bool = False

    @model_validator(mode="after")
    def _check(self):
        if min(self.train, self.val, self.test) < 0:
            raise ValueError("split parts must be non-negative")
        if self.absolute:
            if any(float(v) != int(v) for v in (self.train, self.val, self.test)):
                raise ValueError("absolute split counts must be integers")
        elif abs(self.train + self.val + self.test - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")
        return self


class TrainConfig(StrictModel):
    method: Method = "diffirm"
    iterations: int = Field(200, ge=1)
    batch_size: int = Field(32, ge=1)
    lr: LearningRates = LearningRates()
    lam: float = Field(1.0, ge=0, description="invariance penalty weight λ")
    k_envs: int = Field(5, ge=1, description="K augmented environments")
    seed: int = 0
    predictor: PredictorSpec = PredictorSpec()
    penalty_mode: Literal["firstorder", "exact"] = "firstorder"
    diffusion: DiffusionConfig = DiffusionConfig()
    mask_hidden: int = Field(32, ge=1)
    ratio_alpha: float = Field(0.5, gt=0, lt=1)
    ratio_weight: float = Field(0.1, ge=0)
    bank_refresh: int = Field(20, ge=1, description="R, outer iterations between bank refreshes")
    bank_steps: int = Field(50, ge=1, description="S, inner Adam steps per refresh")
    eval_every: int = Field(20, ge=1)
    warmup_fraction: float = Field(0.2, ge=0, le=1)
    clip_norm: float = Field(5.0, ge=0)
    n_envs: int = Field(2, ge=1, description="temporal segments used as baseline environments")
    rex_form: Literal["variance", "appendix"] = "variance"
    invrat_weight: float = Field(1.0, ge=0)
    divergence_threshold: float = Field(1e6, gt=0)
    hvp_step: float = Field(1e-4, gt=0)
    target_channel: int = Field(0, ge=0)
    force_mask: float | None = Field(None, ge=0, le=1, description="pin M_cau to a constant (ablation/testing)")


class RunConfig(TrainConfig):
    features_path: str | None = None
    adjacency_path: str | None = None
    output_dir: str = "runs"
    feature_names: list[str] | None = None
    split: SplitSpec = SplitSpec()
    standardize: bool = True


class ScmSpec(StrictModel):
    train_variances: list[float] = [4.0, 7.0]
    test_variances: list[float] = [8.0, 9.0]
    n: int = Field(200_000, ge=1, description="samples per environment")
    seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        if any(v <= 0 for v in self.train_variances + self.test_variances):
            raise ValueError("SCM variances must be positive")
        return self


class GraphScmSpec(StrictModel):
    n_nodes: int = Field(8, ge=2, description="ring graph size")
    timesteps: int = Field(400, ge=8)
    tau: int = Field(3, ge=1)
    horizon: int = Field(1, ge=1)
    f_causal: int = Field(2, ge=1)
    f_spurious: int = Field(1, ge=0)
    ar_coef: float = Field(0.5, description="weight of the target's own lag")
    causal_ar: float = Field(0.7, ge=0, lt=1, description="persistence of each causal channel")
    causal_coef: float = Field(0.8)
    neighbor_coef: float = Field(0.2)
    process_noise: float = Field(0.3, ge=0)
    train_spurious_noise: float = Field(0.1, ge=0)
    test_spurious_noise: float = Field(2.0, ge=0)
    train_fraction: float = Field(0.6, gt=0, lt=1)
    seed: int = 0


def config_hash(*models: BaseModel) -> str:
    """First 16 hex chars of SHA-256 over the canonical JSON of one or more models."""
    dumps = [m.model_dump(mode="json") for m in models]
    payload = json.dumps(dumps[0] if len(dumps) == 1 else dumps, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()[:16]
