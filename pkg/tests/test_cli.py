import csv
import math

import pytest

from probfusion import io as pio
from probfusion.cli import main
from probfusion.evaluation import EvalReport
from probfusion.meshing import load_mesh

SMALL = """\
[scene]
n_keyframes = 5
[noise]
masks = 0,0,8,6
[ba]
width = 24
height = 16
iterations = 5
[upsample]
factor = 4
[fusion]
voxel_size = 0.1
truncation = 0.2
[eval]
density = 300
"""


@pytest.fixture(scope="module")
def small_config(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "small.ini"
    p.write_text(SMALL)
    return p


@pytest.fixture(scope="module")
def sweep_run(small_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("sweep")
    code = main(["pipeline", "--config", str(small_config), "--out", str(out), "--umax-sweep", "inf,1,0.1,0.01"])
    assert code == 0
    return out


class TestPipeline:
    def test_single_mesh_run(self, small_config, tmp_path, capsys):
        assert main(["pipeline", "--config", str(small_config), "--out", str(tmp_path)]) == 0
        stdout = capsys.readouterr().out
        assert "accuracy_rmse=" in stdout and "final_cost=" in stdout
        rep = EvalReport.from_json((tmp_path / "report.json").read_text())
        assert math.isfinite(rep.accuracy_rmse) and math.isfinite(rep.completeness_rmse)
        assert load_mesh(tmp_path / "mesh.ply").n_triangles > 0
        for name in ("graph.npz", "solved.npz", "tsdf.bin", "trajectory.txt", "convergence.csv", "convergence.png", "config.ini"):
            assert (tmp_path / name).exists(), name

    def test_artifacts_loadable(self, sweep_run):
        g = pio.load_graph(sweep_run / "graph.npz")
        assert g.n_frames == 5
        vol = pio.read_tsdf(sweep_run / "tsdf.bin")
        assert (vol.weight > 0).any()
        img = pio.read_depth_image(sweep_run / "depth" / "kf_000")
        assert img.z.shape == (64, 96)
        assert pio.read_map(sweep_run / "lowres" / "kf_000.vmap", b"VMAP").shape == (16, 24)

    def test_sweep_triangles_non_increasing(self, sweep_run):
        with open(sweep_run / "sweep.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["u_max"] for r in rows] == ["inf", "1", "0.1", "0.01"]
        tris = [int(r["triangles"]) for r in rows]
        assert tris == sorted(tris, reverse=True)
        for r in rows:
            assert (sweep_run / f"mesh_umax_{r['u_max']}.ply").exists()
        assert (sweep_run / "sweep.png").stat().st_size > 0

    def test_deterministic(self, small_config, sweep_run, tmp_path):
        out = tmp_path / "again"
        assert main(["pipeline", "--config", str(small_config), "--out", str(out), "--umax-sweep", "inf,1,0.1,0.01"]) == 0
        for name in ("graph.npz", "solved.npz", "tsdf.bin", "mesh_umax_0.1.ply", "report_umax_0.1.json", "sweep.csv"):
            assert (out / name).read_bytes() == (sweep_run / name).read_bytes(), name

    def test_stage_rerun(self, small_config, sweep_run, capsys):
        assert main(["mesh", "--config", str(small_config), "--out", str(sweep_run), "--umax", "0.05"]) == 0
        assert "u_max=0.05" in capsys.readouterr().out
        assert load_mesh(sweep_run / "mesh.ply").n_triangles > 0

    def test_droid_filter_constant_weights(self, small_config, sweep_run, capsys):
        args = ["fuse", "--config", str(small_config), "--out", str(sweep_run), "--filter", "droid", "--weight-mode", "constant"]
        assert main(args) == 0
        assert "filter=droid" in capsys.readouterr().out


class TestErrors:
    def test_missing_artifact(self, small_config, tmp_path, capsys):
        assert main(["fuse", "--config", str(small_config), "--out", str(tmp_path)]) == 2
        err = capsys.readouterr().err
        assert "trajectory.txt" in err and "probfusion solve" in err

    def test_bad_config(self, tmp_path, capsys):
        cfg = tmp_path / "bad.ini"
        cfg.write_text("[ba]\nwindw = 3\n")
        assert main(["synth", "--config", str(cfg), "--out", str(tmp_path)]) == 2
        assert "bad.ini:2" in capsys.readouterr().err

    def test_bad_umax_flag(self, capsys):
        with pytest.raises(SystemExit):
            main(["mesh", "--umax", "-1"])

    def test_dump_hessian(self, small_config, tmp_path):
        assert main(["synth", "--config", str(small_config), "--out", str(tmp_path)]) == 0
        assert main(["solve", "--config", str(small_config), "--out", str(tmp_path), "--dump-hessian"]) == 0
        H = pio.read_hessian(tmp_path / "hessian.hess")
        assert H.n_depths == 5 * 24 * 16
