"""
Pydantic models for what training and evaluation hand back.

LossReport is written once per eval interval to the history JSON-lines file;
MetricsReport is the evaluation payload (one row per horizon step, plus
average and final rows).
"""
from __future__ import annotations

from pydantic import BaseModel, Field, model_validator


class LossReport(BaseModel):
    iteration: int = 0
    augmentation: float = Field(..., description="L_aug (or the baseline risk)")
    penalty: float = 0.0
    lam: float = 0.0
    regularizer: float = 0.0
    regularizer_weight: float = 0.0
    total: float | None = None
    env_risks: list[float] = []
    bank_stale: bool = False
    # mean causal-mask entry of the batch; None for baselines
    mask_mean: float | None = None
    # max minus min of env_risks
    risk_spread: float = 0.0
    val_mae: float | None = None

    @model_validator(mode="after")
    def _fill_total(self):
        expected = self.augmentation + self.lam * self.penalty + self.regularizer_weight * self.regularizer
        if self.total is None:
            self.total = expected
        return self


class Metrics(BaseModel):
    mae: float
    rmse: float
    # None when every target is ~0 (undefined marker)
    mape: float | None


class MetricsReport(BaseModel):
    method: str
    seed: int
    config_hash: str
    per_horizon: list[Metrics]
    average: Metrics
    final: Metrics
