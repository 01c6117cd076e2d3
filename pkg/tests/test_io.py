import numpy as np
import pytest

from conftest import random_arrow_system
from probfusion import io as pio
from probfusion.errors import FormatError
from probfusion.geometry import Pose
from probfusion.tsdf import TsdfVolume
from probfusion.upsample import DepthImage


class TestMaps:
    def test_roundtrip_with_nan(self, tmp_path, rng):
        m = rng.random((4, 7)).astype(np.float32).astype(float)
        m[1, 2] = np.nan
        pio.write_map(tmp_path / "a.dmap", m)
        np.testing.assert_array_equal(pio.read_map(tmp_path / "a.dmap"), m)

    def test_header(self, tmp_path):
        pio.write_map(tmp_path / "a.vmap", np.zeros((2, 3)), b"VMAP")
        raw = (tmp_path / "a.vmap").read_bytes()
        assert raw[:4] == b"VMAP" and raw[4:12] == bytes([3, 0, 0, 0, 2, 0, 0, 0]) and len(raw) == 36

    def test_wrong_magic(self, tmp_path):
        pio.write_map(tmp_path / "a.vmap", np.zeros((2, 3)), b"VMAP")
        with pytest.raises(FormatError, match="DMAP"):
            pio.read_map(tmp_path / "a.vmap", b"DMAP")

    def test_truncated(self, tmp_path):
        pio.write_map(tmp_path / "a.dmap", np.zeros((2, 3)))
        (tmp_path / "a.dmap").write_bytes((tmp_path / "a.dmap").read_bytes()[:-4])
        with pytest.raises(FormatError):
            pio.read_map(tmp_path / "a.dmap")

    def test_depth_image(self, tmp_path):
        img = DepthImage(np.full((3, 4), 2.0), np.full((3, 4), 0.25), keyframe=5)
        pio.write_depth_image(tmp_path / "kf", img)
        back = pio.read_depth_image(tmp_path / "kf", 5)
        np.testing.assert_array_equal(back.z, img.z)
        np.testing.assert_array_equal(back.sigma, img.sigma)


class TestTsdf:
    def test_roundtrip(self, tmp_path, rng):
        vol = TsdfVolume.create((0.5, -1.0, 0.25), 0.05, (3, 4, 5), 0.1)
        vol.phi[:] = rng.uniform(-0.1, 0.1, vol.dims).astype(np.float32)
        vol.weight[:] = rng.random(vol.dims).astype(np.float32)
        pio.write_tsdf(tmp_path / "t.bin", vol)
        back = pio.read_tsdf(tmp_path / "t.bin")
        assert back.dims == vol.dims and back.voxel_size == 0.05 and back.truncation == 0.1
        np.testing.assert_array_equal(back.origin, vol.origin)
        np.testing.assert_array_equal(back.phi, vol.phi)
        np.testing.assert_array_equal(back.weight, vol.weight)

    def test_layout(self, tmp_path):
        vol = TsdfVolume.create((0, 0, 0), 1.0, (1, 1, 2), 0.1)
        vol.weight[0, 0, 1] = 2.0
        raw = pio.write_tsdf(tmp_path / "t.bin", vol).read_bytes()
        body = np.frombuffer(raw[-16:], dtype="<f4")
        np.testing.assert_allclose(body, [0.1, 0.0, 0.1, 2.0])


class TestHessian:
    def test_roundtrip(self, tmp_path, rng):
        H = random_arrow_system(rng, 3, 40)
        pio.write_hessian(tmp_path / "h.hess", H)
        back = pio.read_hessian(tmp_path / "h.hess")
        np.testing.assert_array_equal(back.dense(), H.dense())
        np.testing.assert_array_equal(back.v, H.v)
        np.testing.assert_array_equal(back.w, H.w)

    def test_truncated(self, tmp_path, rng):
        p = pio.write_hessian(tmp_path / "h.hess", random_arrow_system(rng, 2, 10))
        p.write_bytes(p.read_bytes()[:100])
        with pytest.raises(FormatError):
            pio.read_hessian(p)


class TestArchives:
    def test_npz_deterministic(self, tmp_path, rng):
        a = rng.random((5, 5))
        pio.save_npz(tmp_path / "a.npz", x=a, y=np.arange(3))
        pio.save_npz(tmp_path / "b.npz", y=np.arange(3), x=a)
        assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()
        np.testing.assert_array_equal(pio.load_npz(tmp_path / "a.npz")["x"], a)

    def test_bad_archive(self, tmp_path):
        (tmp_path / "x.npz").write_bytes(b"nope")
        with pytest.raises(FormatError):
            pio.load_npz(tmp_path / "x.npz")

    def test_poses(self):
        poses = [Pose.identity(), Pose([0.1, 0.2, 0.3, 0.9], [1, 2, 3])]
        back = pio.poses_from_array(pio.poses_to_array(poses))
        for p, q in zip(poses, back):
            np.testing.assert_allclose(q.matrix(), p.matrix(), atol=1e-15)

    def test_graph_roundtrip(self, tmp_path, noiseless_graph):
        pio.save_graph(tmp_path / "g.npz", noiseless_graph)
        g = pio.load_graph(tmp_path / "g.npz")
        assert g.K == noiseless_graph.K and g.gauge == noiseless_graph.gauge
        np.testing.assert_array_equal(g.target, noiseless_graph.target)
        np.testing.assert_array_equal(g.truth.outlier, noiseless_graph.truth.outlier)
        pio.save_graph(tmp_path / "h.npz", g)
        assert (tmp_path / "g.npz").read_bytes() == (tmp_path / "h.npz").read_bytes()

    def test_graph_missing_arrays(self, tmp_path):
        pio.save_npz(tmp_path / "g.npz", K=np.zeros(6))
        with pytest.raises(FormatError, match="missing"):
            pio.load_graph(tmp_path / "g.npz")
