"""
Tests for the predictor backbones.

Covers:
- an identity graph keeps STGCN-lite node forecasts independent
"""
import numpy as np
import pytest

from diffirm.core.gradcheck import grad_check_params
from diffirm.core.tensor import Tensor, mse_loss
from diffirm.errors import DimensionError
from diffirm.graph import normalize_adjacency, path_graph, ring_graph
from diffirm.models.config import PredictorSpec
from diffirm.predictors import init_params, predict


def _spec(**kw):
    values = dict(backbone="linear", tau=3, horizon=1, n_features=2, n_nodes=4, hidden=5, kernel=2)
    values.update(kw)
    return PredictorSpec(**values)


def test_linear_copy_weights_repeat_last_observation():
    """A weight of 1 on the newest channel-0 entry reproduces the last value."""
    spec = _spec()
    w = np.zeros((6, 1))
    w[0, 0] = 1.0
    params = {"head.w": Tensor(w), "head.b": Tensor(np.zeros(1))}
    x = np.random.default_rng(0).standard_normal((4, 3, 2))
    np.testing.assert_allclose(predict(spec, params, x, normalize_adjacency(ring_graph(4))).data[:, 0], x[:, -1, 0])


def test_zero_mlp_predicts_zero():
    """All-zero parameters give a zero forecast."""
    spec = _spec(backbone="mlp", horizon=2)
    params = {k: Tensor(np.zeros(p.shape)) for k, p in init_params(spec, 0).items()}
    x = np.random.default_rng(1).standard_normal((2, 4, 3, 2))
    out = predict(spec, params, x, normalize_adjacency(ring_graph(4)))
    assert out.shape == (2, 4, 2)
    np.testing.assert_array_equal(out.data, 0.0)


@pytest.mark.parametrize("backbone", ["linear", "mlp", "stgcn_lite"])
def test_single_window_and_batch_agree(backbone):
    """A single window predicts the same as a batch of one."""
    spec = _spec(backbone=backbone, horizon=2)
    params = init_params(spec, 4)
    a_hat = normalize_adjacency(ring_graph(4))
    x = np.random.default_rng(2).standard_normal((4, 3, 2))
    single = predict(spec, params, x, a_hat).data
    batch = predict(spec, params, x[None], a_hat).data
    assert single.shape == (4, 2)
    np.testing.assert_allclose(single, batch[0])


def test_stgcn_identity_graph_keeps_nodes_independent():
    """With Â = I, changing node 1's history leaves the other nodes' forecasts unchanged."""
    spec = _spec(backbone="stgcn_lite", horizon=2)
    params = init_params(spec, 6)
    x = np.random.default_rng(6).standard_normal((2, 4, 3, 2))
    moved = x.copy()
    moved[:, 1] += 4.0
    base = predict(spec, params, x, np.eye(4)).data
    other = predict(spec, params, moved, np.eye(4)).data
    np.testing.assert_allclose(other[:, [0, 2, 3]], base[:, [0, 2, 3]], rtol=1e-12, atol=1e-12)
    assert not np.allclose(other[:, 1], base[:, 1])


@pytest.mark.parametrize("adaptive", [False, True])
def test_stgcn_gradients_match_finite_differences(adaptive):
    """STGCN-lite parameter gradients agree with central differences."""
    spec = PredictorSpec(backbone="stgcn_lite", tau=4, horizon=2, n_features=2, n_nodes=3,
                         hidden=3, kernel=2, activation="tanh", adaptive=adaptive, adaptive_dim=2)
    rng = np.random.default_rng(5)
    params = {k: Tensor(p.data + 0.1 * rng.standard_normal(p.shape), requires_grad=True)
              for k, p in init_params(spec, 7).items()}
    x = rng.standard_normal((2, 3, 4, 2))
    y = rng.standard_normal((2, 3, 2))
    a_hat = normalize_adjacency(path_graph(3))
    assert grad_check_params(lambda ps: mse_loss(predict(spec, ps, x, a_hat), y), params) < 1e-4


def test_init_is_deterministic_with_zero_biases():
    """Same seed gives the same weights; every bias starts at zero."""
    spec = _spec(backbone="stgcn_lite")
    first, second = init_params(spec, 11), init_params(spec, 11)
    assert first.keys() == second.keys()
    for name in first:
        np.testing.assert_array_equal(first[name].data, second[name].data)
        if name.endswith(".b"):
            np.testing.assert_array_equal(first[name].data, 0.0)
    assert not np.array_equal(init_params(spec, 12)["gcn.w"].data, first["gcn.w"].data)


def test_wrong_input_shape():
    """Inputs that do not match the predictor shape raise a dimension error."""
    spec = _spec()
    with pytest.raises(DimensionError):
        predict(spec, init_params(spec, 0), np.zeros((4, 2, 2)), normalize_adjacency(ring_graph(4)))
