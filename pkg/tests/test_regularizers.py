import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from d2ip.regularizers import FrameHistory, TVWeights, decay_weight, spatial_tv, temporal_tv, tv4d


def finite_difference(fn, volume, h=1e-6):
    """Central-difference gradient of a scalar function of a volume."""
    grad = np.zeros_like(volume)
    it = np.nditer(volume, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        up, down = volume.copy(), volume.copy()
        up[idx] += h
        down[idx] -= h
        grad[idx] = (fn(up) - fn(down)) / (2 * h)
    return grad


class TestSpatialTV:
    def test_constant_volume_exact(self):
        vol = np.full((2, 2, 2), 3.7)
        assert spatial_tv(vol, 1e-8) == pytest.approx(math.sqrt(1e-8), rel=1e-12)

    def test_two_voxel_oracle(self):
        # volume [0, 1] along rows: one unit difference, one boundary zero
        eps = 1e-8
        vol = np.array([0.0, 1.0]).reshape(2, 1, 1)
        expected = (math.sqrt(1 + eps) + math.sqrt(eps)) / 2
        assert spatial_tv(vol, eps) == pytest.approx(expected, rel=1e-12)
        assert expected == pytest.approx(0.50005, abs=1e-5)

    def test_absolute_homogeneity_at_small_epsilon(self):
        rng = np.random.default_rng(0)
        vol = rng.normal(size=(5, 4, 3))
        a = 3.0
        assert spatial_tv(a * vol, 1e-12) == pytest.approx(a * spatial_tv(vol, 1e-12), rel=1e-4)

    def test_axis_permutation_invariance(self):
        rng = np.random.default_rng(1)
        vol = rng.normal(size=(4, 4, 4))
        base = spatial_tv(vol)
        for perm in ((1, 0, 2), (2, 1, 0), (0, 2, 1), (1, 2, 0), (2, 0, 1)):
            assert spatial_tv(np.transpose(vol, perm)) == pytest.approx(base, rel=1e-12)

    def test_torch_input_returns_tensor(self):
        t = torch.rand(3, 3, 3, dtype=torch.float64, requires_grad=True)
        value = spatial_tv(t)
        assert isinstance(value, torch.Tensor)
        value.backward()
        assert t.grad is not None

    @given(st.integers(0, 10_000))
    @settings(max_examples=20, deadline=None)
    def test_nonnegative(self, seed):
        vol = np.random.default_rng(seed).normal(size=(3, 4, 2))
        assert spatial_tv(vol) >= 0

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        vol = rng.normal(size=(4, 4, 4))
        t = torch.tensor(vol, requires_grad=True)
        spatial_tv(t).backward()
        fd = finite_difference(lambda v: spatial_tv(v), vol)
        np.testing.assert_allclose(t.grad.numpy(), fd, rtol=1e-4, atol=1e-8)


class TestDecayWeight:
    def test_values(self):
        assert decay_weight(1, 2) == pytest.approx(0.367879, abs=1e-6)
        assert decay_weight(1, 4) == pytest.approx(0.049787, abs=1e-6)

    def test_exponential_ratio(self):
        for i in (3, 5, 9):
            for j in range(1, i - 1):
                assert decay_weight(j, i) / decay_weight(j + 1, i) == pytest.approx(math.exp(-1))

    def test_monotone_decay(self):
        weights = [decay_weight(j, 10) for j in range(1, 10)]
        assert all(a < b for a, b in zip(weights, weights[1:]))

    def test_rejects_bad_order(self):
        with pytest.raises(ValueError):
            decay_weight(3, 3)
        with pytest.raises(ValueError):
            decay_weight(0, 2)


class TestTemporalTV:
    def test_empty_history_is_zero(self):
        assert temporal_tv(FrameHistory(), np.ones((2, 2, 2))) == 0.0

    def test_identical_single_frame(self):
        eps = 1e-8
        vol = np.random.default_rng(3).normal(size=(3, 2, 2))
        value = temporal_tv(FrameHistory([vol.copy()]), vol, eps)
        assert value == pytest.approx(vol.size * math.sqrt(eps), rel=1e-9)

    def test_two_frame_decay_weights(self):
        eps = 1e-8
        rng = np.random.default_rng(4)
        f1, f2, cur = (rng.normal(size=(2, 2, 2)) for _ in range(3))
        value = temporal_tv(FrameHistory([f1, f2]), cur, eps)
        s1 = np.sqrt((cur - f1) ** 2 + eps).sum()
        s2 = np.sqrt((cur - f2) ** 2 + eps).sum()
        a1, a2 = math.exp(-2), math.exp(-1)
        assert value == pytest.approx((a1 * s1 + a2 * s2) / (a1 + a2), rel=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        history = FrameHistory([rng.normal(size=(4, 4, 4)) for _ in range(2)])
        vol = rng.normal(size=(4, 4, 4))
        t = torch.tensor(vol, requires_grad=True)
        temporal_tv(history, t).backward()
        fd = finite_difference(lambda v: temporal_tv(history, v), vol)
        np.testing.assert_allclose(t.grad.numpy(), fd, rtol=1e-4, atol=1e-8)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            temporal_tv(FrameHistory([np.ones((2, 2, 2))]), np.ones((3, 3, 3)))


class TestTV4D:
    def test_zero_weights(self):
        weights = TVWeights(lambda_tv=0.002, lambda_s=0.0, lambda_t=0.0)
        vol = np.random.default_rng(6).normal(size=(3, 3, 3))
        assert tv4d(FrameHistory([vol + 1]), vol, weights) == 0.0

    def test_empty_history_reduces_to_spatial(self):
        weights = TVWeights()
        vol = np.random.default_rng(7).normal(size=(3, 3, 3))
        expected = weights.lambda_s * spatial_tv(vol, weights.epsilon)
        assert tv4d(FrameHistory(), vol, weights) == pytest.approx(expected, rel=1e-12)

    def test_known_combination(self):
        eps = 1e-8
        weights = TVWeights(lambda_s=1.0, lambda_t=0.1, epsilon=eps)
        vol = np.array([0.0, 1.0]).reshape(2, 1, 1)
        prev = np.zeros((2, 1, 1))
        expected_spatial = (math.sqrt(1 + eps) + math.sqrt(eps)) / 2
        expected_temporal = math.sqrt(eps) + math.sqrt(1 + eps)
        expected = 1.0 * expected_spatial + 0.1 * expected_temporal
        assert tv4d(FrameHistory([prev]), vol, weights) == pytest.approx(expected, rel=1e-12)

    def test_default_weights(self):
        weights = TVWeights()
        assert (weights.lambda_tv, weights.lambda_s, weights.lambda_t, weights.epsilon) == (
            0.002,
            1.0,
            0.1,
            1e-8,
        )

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        history = FrameHistory([rng.normal(size=(4, 4, 4))])
        vol = rng.normal(size=(4, 4, 4))
        weights = TVWeights()
        t = torch.tensor(vol, requires_grad=True)
        tv4d(history, t, weights).backward()
        fd = finite_difference(lambda v: tv4d(history, v, weights), vol)
        np.testing.assert_allclose(t.grad.numpy(), fd, rtol=1e-4, atol=1e-8)

    def test_nonnegative(self):
        rng = np.random.default_rng(9)
        for _ in range(10):
            vol = rng.normal(size=(3, 3, 3))
            hist = FrameHistory([rng.normal(size=(3, 3, 3))])
            assert tv4d(hist, vol, TVWeights()) >= 0

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            TVWeights(lambda_s=-1.0)
