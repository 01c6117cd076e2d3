import numpy as np
import pytest

from probfusion.errors import AllZeroWeights, DimensionMismatch, InvalidPose
from probfusion.geometry import Intrinsics, Pose
from probfusion.tsdf import MAX_WEIGHT, FusionWeightMode, TsdfVolume, fused_value_oracle, measurement_weight
from probfusion.upsample import DepthImage

TAU = 0.1


@pytest.fixture
def K():
    return Intrinsics.from_fov(32, 24, 60.0)


def flat_image(K, z, sigma=0.01):
    return DepthImage(np.full((K.height, K.width), z), np.full((K.height, K.width), sigma))


def column_volume(n=40, vs=0.01):
    """A 1-voxel-wide column along +z in front of an identity camera."""
    return TsdfVolume.create((0.0, 0.0, 0.5), vs, (1, 1, n), TAU)


class TestWeights:
    def test_modes(self):
        s = np.array([0.1, 0.5, 2.0])
        np.testing.assert_allclose(measurement_weight(s, "inv-sigma"), 1 / s)
        np.testing.assert_allclose(measurement_weight(s, "inv-var"), 1 / s**2)
        np.testing.assert_array_equal(measurement_weight(s, "constant"), 1.0)

    def test_clamped(self):
        assert measurement_weight(np.array([0.0, 1e-9]), "inv-sigma").tolist() == [MAX_WEIGHT, MAX_WEIGHT]

    def test_nan_sigma_gives_zero(self):
        assert measurement_weight(np.array([np.nan]), "inv-var")[0] == 0.0

    def test_unknown_mode(self):
        with pytest.raises(ValueError, match="inv-sigma"):
            FusionWeightMode.parse("median")


class TestOracle:
    def test_single(self):
        assert fused_value_oracle([(0.03, 0.2)]) == pytest.approx(0.03)

    def test_equal_sigma_is_mean(self):
        assert fused_value_oracle([(0.01, 0.1), (0.05, 0.1), (0.03, 0.1)]) == pytest.approx(0.03)

    def test_all_zero(self):
        with pytest.raises(AllZeroWeights):
            fused_value_oracle([(0.01, np.nan)])


class TestUpdate:
    def test_first_update_replaces_prior(self):
        vol = TsdfVolume.create((0, 0, 0), 1.0, (1, 1, 1), TAU)
        vol.update(np.array([0]), np.array([0.04]), np.array([7.0]))
        assert vol.phi.item() == 0.04 and vol.weight.item() == 7.0

    def test_two_updates(self):
        vol = TsdfVolume.create((0, 0, 0), 1.0, (1, 1, 1), TAU)
        vol.update(np.array([0]), np.array([0.1]), np.array([1.0]))
        vol.update(np.array([0]), np.array([-0.1]), np.array([3.0]))
        assert vol.phi.item() == pytest.approx(-0.05) and vol.weight.item() == 4.0


class TestIntegrate:
    def test_projective_distance_and_culling(self, K):
        vol = column_volume()
        vol.integrate(flat_image(K, 0.7), Pose.identity(), K, "constant")
        z = 0.5 + 0.01 * np.arange(40)
        s = 0.7 - z
        seen = s >= -TAU
        np.testing.assert_allclose(vol.phi[0, 0, seen], np.clip(s[seen], -TAU, TAU), atol=1e-12)
        # behind-surface culling: never updated
        assert np.all(vol.weight[0, 0, ~seen] == 0) and np.all(vol.phi[0, 0, ~seen] == TAU)

    def test_constant_equals_inv_sigma_with_equal_sigma(self, K):
        a, b = column_volume(), column_volume()
        for z in (0.68, 0.71, 0.7):
            a.integrate(flat_image(K, z, 0.02), Pose.identity(), K, "constant")
            b.integrate(flat_image(K, z, 0.02), Pose.identity(), K, "inv-sigma")
        np.testing.assert_allclose(a.phi, b.phi, atol=1e-12)

    def test_weight_monotone(self, K):
        vol = column_volume()
        rng = np.random.default_rng(0)
        prev = vol.weight.copy()
        for _ in range(10):
            vol.integrate(flat_image(K, 0.7 + 0.05 * rng.standard_normal(), rng.uniform(0.01, 0.1)), Pose.identity(), K)
            assert np.all(vol.weight >= prev)
            prev = vol.weight.copy()

    def test_invalid_pixels_ignored(self, K):
        img = flat_image(K, 0.7)
        img.z[:] = np.nan
        vol = column_volume()
        vol.integrate(img, Pose.identity(), K)
        assert not vol.weight.any()

    def test_errors(self, K):
        vol = column_volume()
        with pytest.raises(DimensionMismatch):
            vol.integrate(DepthImage(np.ones((3, 3)), np.ones((3, 3))), Pose.identity(), K)
        bad = Pose(translation=np.array([np.nan, 0, 0]))
        with pytest.raises(InvalidPose):
            vol.integrate(flat_image(K, 0.7), bad, K)

    @pytest.mark.parametrize("mode", list(FusionWeightMode))
    def test_permutations_match_oracle(self, K, mode):
        rng = np.random.default_rng(3)
        n = 12
        zs = 0.7 + 0.03 * rng.standard_normal(n)
        sig = rng.uniform(0.005, 0.1, n)
        centers = 0.5 + 0.01 * np.arange(40)
        want = np.full(40, np.nan)
        for k, zc in enumerate(centers):
            m = [(z - zc, s) for z, s in zip(zs, sig) if z - zc >= -TAU]
            if m:
                want[k] = fused_value_oracle(m, mode, truncation=TAU)
        seen = np.isfinite(want)
        for _ in range(100):
            vol = column_volume()
            for i in rng.permutation(n):
                vol.integrate(flat_image(K, zs[i], sig[i]), Pose.identity(), K, mode)
            np.testing.assert_allclose(vol.phi[0, 0, seen], want[seen], atol=1e-6)

    def test_order_invariance_of_weights(self, K):
        rng = np.random.default_rng(4)
        imgs = [flat_image(K, 0.7 + 0.02 * rng.standard_normal(), rng.uniform(0.01, 0.05)) for _ in range(6)]
        a, b = column_volume(), column_volume()
        for im in imgs:
            a.integrate(im, Pose.identity(), K)
        for im in imgs[::-1]:
            b.integrate(im, Pose.identity(), K)
        np.testing.assert_allclose(a.weight, b.weight, atol=1e-6)
        np.testing.assert_allclose(a.phi, b.phi, atol=1e-6)

    def test_heteroscedastic(self, K):
        """Precise unbiased measurements plus noisy biased ones: weighting lands closer to the surface."""
        rng = np.random.default_rng(5)
        truth = 0.7
        good = [(truth + 0.002 * rng.standard_normal(), 0.002) for _ in range(5)]
        bad = [(truth + 0.05 + 0.02 * rng.standard_normal(), 0.05) for _ in range(5)]
        k = int(round((truth - 0.5) / 0.01))
        err = {}
        for mode in ("constant", "inv-sigma", "inv-var"):
            vol = column_volume()
            for z, s in good + bad:
                vol.integrate(flat_image(K, z, s), Pose.identity(), K, mode)
            err[mode] = abs(vol.phi[0, 0, k])
        assert err["inv-sigma"] < err["constant"]
        assert err["inv-var"] < err["inv-sigma"]

    def test_enclosing(self):
        vol = TsdfVolume.enclosing((0, 0, 0), (1, 1, 1), 0.1, TAU, margin=0.2)
        assert vol.dims == (15, 15, 15)
        np.testing.assert_allclose(vol.origin, -0.2)
