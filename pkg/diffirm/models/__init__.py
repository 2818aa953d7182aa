"""
Configuration and report models.
"""
from diffirm.models.config import (
    METHODS,
    DiffusionConfig,
    GraphScmSpec,
    LearningRates,
    PredictorSpec,
    RunConfig,
    ScmSpec,
    SplitSpec,
    TrainConfig,
    config_hash,
)
from diffirm.models.reports import LossReport, Metrics, MetricsReport

__all__ = [
    "METHODS", "DiffusionConfig", "GraphScmSpec", "LearningRates", "PredictorSpec",
    "RunConfig", "ScmSpec", "SplitSpec", "TrainConfig", "config_hash",
    "LossReport", "Metrics", "MetricsReport",
]
