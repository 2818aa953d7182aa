"""
Shared fixtures: a tiny ring-graph dataset and a fast training config.
"""
import numpy as np
import pytest

from diffirm.dataset import StDataset
from diffirm.graph import Graph, ring_graph
from diffirm.models.config import DiffusionConfig, LearningRates, PredictorSpec, SplitSpec, TrainConfig
from diffirm.trainer import TrainData


def make_dataset(n_nodes=4, steps=30, n_features=2, tau=3, horizon=2, seed=0) -> StDataset:
    rng = np.random.default_rng(seed)
    series = np.cumsum(rng.standard_normal((steps, n_nodes, n_features)), axis=0) * 0.3
    graph = Graph(ring_graph(n_nodes).adjacency, tuple(f"node{i}" for i in range(n_nodes)))
    return StDataset(
        graph=graph,
        series=series,
        feature_names=tuple(f"f{j}" for j in range(n_features)),
        timestamps=tuple(str(t) for t in range(steps)),
        tau=tau,
        horizon=horizon,
    )


@pytest.fixture
def dataset() -> StDataset:
    return make_dataset()


@pytest.fixture
def train_data(dataset) -> TrainData:
    return TrainData.from_dataset(dataset, SplitSpec())


@pytest.fixture
def fast_config():
    """Builds a TrainConfig small enough to train in well under a second per iteration."""
    def build(method="erm", **overrides):
        values = dict(
            method=method,
            seed=3,
            iterations=6,
            batch_size=4,
            lr=LearningRates(theta=1e-2, phi=1e-2, psi=1e-3, eta=1e-2),
            k_envs=2,
            predictor=PredictorSpec(backbone="linear"),
            diffusion=DiffusionConfig(l_diff=8, d_emb=4, hidden=4),
            mask_hidden=4,
            eval_every=2,
            bank_refresh=2,
            bank_steps=3,
        )
        values.update(overrides)
        return TrainConfig(**values)
    return build


@pytest.fixture
def make_st():
    return make_dataset
