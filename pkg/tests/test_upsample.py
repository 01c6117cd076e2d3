import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from probfusion.errors import DimensionMismatch, NonPositiveInverseDepth
from probfusion.upsample import OFFSETS, ConvexWeightField, DepthImage, convex_upsample, invdepth_to_depth, upsample_keyframe


def random_field(rng, low_shape, factor):
    h, w = low_shape
    raw = rng.random((h * factor, w * factor, 9)) ** 3
    return ConvexWeightField(raw / raw.sum(axis=2, keepdims=True), factor)


class TestWeightField:
    def test_rejects_negative(self):
        w = np.zeros((8, 8, 9))
        w[..., 4] = 1.5
        w[..., 0] = -0.5
        with pytest.raises(ValueError):
            ConvexWeightField(w, 8)

    def test_rejects_unnormalized(self):
        with pytest.raises(ValueError):
            ConvexWeightField(np.full((8, 8, 9), 0.2), 8)

    @pytest.mark.parametrize("make", [ConvexWeightField.onehot, ConvexWeightField.bilinear])
    def test_factory_fields_are_convex(self, make):
        wf = make((5, 7), 8)
        assert wf.weights.shape == (40, 56, 9)
        assert wf.low_shape == (5, 7)
        np.testing.assert_allclose(wf.weights.sum(axis=2), 1.0)

    def test_default_resolution(self):
        wf = ConvexWeightField.bilinear((44, 69))
        assert wf.high_shape == (352, 552)

    def test_bilinear_reproduces_linear_ramp_inside(self):
        h, w = 6, 9
        low = np.add.outer(0.3 * np.arange(h), 0.1 * np.arange(w)) + 1.0
        d, _ = convex_upsample(low, np.ones_like(low), ConvexWeightField.bilinear((h, w), 4))
        v, u = np.mgrid[0 : 4 * h, 0 : 4 * w]
        y, x = (v + 0.5) / 4 - 0.5, (u + 0.5) / 4 - 0.5
        inside = (y >= 0) & (y <= h - 1) & (x >= 0) & (x <= w - 1)
        np.testing.assert_allclose(d[inside], (1 + 0.3 * y + 0.1 * x)[inside], atol=1e-12)


class TestConvexUpsample:
    def test_onehot_passthrough(self, rng):
        low, var = rng.random((4, 5)) + 0.1, rng.random((4, 5))
        d, v = convex_upsample(low, var, ConvexWeightField.onehot((4, 5), 8))
        np.testing.assert_array_equal(d, np.kron(low, np.ones((8, 8))))
        np.testing.assert_array_equal(v, np.kron(var, np.ones((8, 8))))

    def test_uniform_weights_on_constant_map(self):
        wf = ConvexWeightField(np.full((16, 16, 9), 1 / 9), 4)
        d, v = convex_upsample(np.full((4, 4), 0.7), np.full((4, 4), 0.09), wf)
        np.testing.assert_allclose(d, 0.7)
        np.testing.assert_allclose(v[4:12, 4:12], 0.01)
        # corner window reads pixel (0, 0) four times: (4/9)^2 + 4 (1/9)^2 + ... of 0.09
        assert v[0, 0] == pytest.approx(0.09 * (16 + 2 * 4 + 1) / 81)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_convexity(self, seed):
        rng = np.random.default_rng(seed)
        low = rng.random((5, 6)) + 0.1
        d, _ = convex_upsample(low, np.ones_like(low), random_field(rng, (5, 6), 3))
        pad = np.pad(low, 1, mode="edge")
        for Y in range(0, 15, 4):
            for X in range(0, 18, 5):
                win = pad[Y // 3 : Y // 3 + 3, X // 3 : X // 3 + 3]
                assert win.min() - 1e-12 <= d[Y, X] <= win.max() + 1e-12

    def test_window_layout(self):
        low = np.zeros((3, 3))
        low[0, 0] = 1.0
        for k, (dy, dx) in enumerate(OFFSETS):
            w = np.zeros((3, 3, 9))
            w[..., k] = 1.0
            d, _ = convex_upsample(low, low, ConvexWeightField(w, 1))
            # center pixel (1, 1) looks at (1 + dy, 1 + dx)
            assert d[1, 1] == (1.0 if (dy, dx) == (-1, -1) else 0.0)

    def test_invalid_propagates_only_through_support(self):
        low = np.ones((3, 3))
        low[0, 0] = np.nan
        d, v = convex_upsample(low, np.ones((3, 3)), ConvexWeightField.onehot((3, 3), 2))
        assert np.isnan(d[:2, :2]).all() and np.isnan(v[:2, :2]).all()
        assert np.isfinite(d[2:, :]).all() and np.isfinite(d[:, 2:]).all()

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            convex_upsample(np.ones((3, 3)), np.ones((3, 3)), ConvexWeightField.onehot((4, 4), 2))
        with pytest.raises(DimensionMismatch):
            convex_upsample(np.ones((3, 3)), np.ones((3, 4)), ConvexWeightField.onehot((3, 3), 2))

    @pytest.mark.parametrize("pixel", [(5, 2), (0, 0), (7, 3), (0, 7)])
    def test_variance_matches_monte_carlo(self, pixel):
        rng = np.random.default_rng(8)
        h, w = 4, 4
        wf = random_field(rng, (h, w), 2)
        mu = rng.random((h, w)) + 1.0
        var = (0.05 * (rng.random((h, w)) + 0.5)) ** 2
        _, v = convex_upsample(mu, var, wf)
        n = 100_000
        samples = mu + np.sqrt(var) * rng.standard_normal((n, h, w))
        pad = np.pad(samples, ((0, 0), (1, 1), (1, 1)), mode="edge")
        Y, X = pixel
        cy, cx = Y // 2, X // 2
        acc = np.zeros(n)
        for k, (dy, dx) in enumerate(OFFSETS):
            acc += wf.weights[Y, X, k] * pad[:, cy + dy + 1, cx + dx + 1]
        assert acc.var() == pytest.approx(v[Y, X], rel=0.05)


class TestInvDepthToDepth:
    def test_unit(self):
        assert invdepth_to_depth(1.0, 0.1) == (1.0, pytest.approx(0.1))

    def test_two(self):
        z, s = invdepth_to_depth(2.0, 0.2)
        assert z == 0.5 and s == pytest.approx(0.05)

    def test_monte_carlo(self):
        rng = np.random.default_rng(0)
        d, sd = 2.0, 0.02
        samples = 1.0 / (d + sd * rng.standard_normal(1_000_000))
        _, s = invdepth_to_depth(d, sd)
        assert samples.std() == pytest.approx(s, rel=0.03)

    @pytest.mark.parametrize("d", [0.0, -1.0])
    def test_rejects_nonpositive(self, d):
        with pytest.raises(NonPositiveInverseDepth):
            invdepth_to_depth(d, 0.1)

    def test_keyframe_image(self):
        img = upsample_keyframe(np.full((2, 3), 0.5), np.full((2, 3), 0.01), ConvexWeightField.onehot((2, 3), 8), 4)
        assert isinstance(img, DepthImage) and img.keyframe == 4
        np.testing.assert_allclose(img.z, 2.0)
        np.testing.assert_allclose(img.sigma, 0.1 / 0.25)
        assert img.valid.all()
