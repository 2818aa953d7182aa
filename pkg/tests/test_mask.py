"""
Tests for the causal mask net, the blend and the mask report.
"""
import numpy as np
import pytest

from diffirm.augment.mask import (
    CausalMaskNet,
    causal_gap,
    combine,
    generate_mask,
    mask_report,
    ratio_regularizer,
    window_masks,
)
from diffirm.core.tensor import Tensor
from diffirm.errors import ContractError, DimensionError


def _net(bias=0.0):
    net = CausalMaskNet.init(3, 2, hidden=4, seed=0)
    params = {k: Tensor(np.zeros(p.shape)) for k, p in net.params.items()}
    params["out.b"] = Tensor(np.full(6, bias))
    return net.with_params(params)


def test_zero_weights_give_half():
    """sigmoid(0) everywhere."""
    m = generate_mask(_net(), np.random.default_rng(0).standard_normal((4, 3, 2)))
    np.testing.assert_array_equal(m.data, 0.5)


def test_large_bias_saturates_but_stays_below_one():
    """A bias of 10 gives entries above 0.9999 and never exactly 1."""
    m = generate_mask(_net(10.0), np.zeros((2, 4, 3, 2))).data
    assert m.shape == (2, 4, 3, 2)
    assert np.all(m > 0.9999) and np.all(m < 1.0)


def test_mask_shape_checked():
    """The history length must match the net."""
    with pytest.raises(DimensionError):
        generate_mask(_net(), np.zeros((4, 5, 2)))


def test_combine_boundaries():
    """M = 1 keeps X, M = 0 takes X̂."""
    rng = np.random.default_rng(1)
    x, x_hat = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
    np.testing.assert_array_equal(combine(x, x_hat, np.ones((2, 3))).data, x)
    np.testing.assert_array_equal(combine(x, x_hat, np.zeros((2, 3))).data, x_hat)


def test_combine_blend_value():
    """2 · 0.25 + 4 · 0.75 = 3.5."""
    assert combine([2.0], [4.0], [0.25]).data[0] == 3.5


def test_combine_rejects_out_of_range_mask():
    """Masks outside [0, 1] are contract errors."""
    with pytest.raises(ContractError):
        combine([1.0], [1.0], [1.5])


def test_ratio_regularizer():
    """An all-ones mask against α = 0.5 scores 0.25; an invalid α is rejected."""
    assert ratio_regularizer(np.ones((3, 2)), 0.5).item() == 0.25
    assert ratio_regularizer(np.full((3, 2), 0.3), 0.3).item() < 1e-20
    with pytest.raises(ContractError):
        ratio_regularizer(np.ones(2), 1.0)


def test_mask_report_orders_lags_newest_first():
    """lag_0 is the last step of the window; rows follow the feature names."""
    masks = np.full((5, 4, 3, 2), 0.2)
    masks[..., 0] = 0.8
    masks[:, :, -1, 0] = 1.0
    report = mask_report([masks], ["causal", "spurious"])
    assert list(report.columns) == ["lag_0", "lag_1", "lag_2"]
    assert report.loc["causal", "lag_0"] == 1.0
    assert report.loc["causal", "lag_2"] == pytest.approx(0.8)
    assert report.loc["spurious"].tolist() == pytest.approx([0.2, 0.2, 0.2])
    assert causal_gap(report, [0], [1]) == pytest.approx((1.0 + 0.8 + 0.8) / 3 - 0.2)


def test_mask_report_needs_masks():
    """An empty iterable has nothing to average."""
    with pytest.raises(ContractError):
        mask_report([], ["a"])


def test_window_masks_batches_cover_every_window():
    """Batched masks stack back into the unbatched result."""
    net = CausalMaskNet.init(3, 2, hidden=4, seed=2)
    x = np.random.default_rng(3).standard_normal((5, 4, 3, 2))
    parts = list(window_masks(net, x, batch_size=2))
    assert len(parts) == 3
    np.testing.assert_allclose(np.concatenate(parts), generate_mask(net, x).data)
