"""Command line entry point: ``probfusion <stage> [--config FILE] [overrides]``.

Stages read their inputs from and write their outputs to the ``--out``
directory, so each can be rerun on its own once its upstream artifacts exist::

    synth     graph.npz, gt_cloud.ply, trajectory_gt.txt
    solve     solved.npz, trajectory.txt, depth/kf_###.{z,sigma}.dmap,
              lowres/kf_###.{dmap,vmap}, convergence.csv, *.png
    fuse      tsdf.bin
    mesh      mesh.ply, or mesh_umax_<u>.ply per sweep value, plus meshes.csv
    eval      report.txt / report.json per mesh; sweep.csv and sweep.png
    pipeline  all of the above
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import io as pio
from .config import dump_config, load_config
from .errors import MissingArtifact, ProbFusionError
from .geometry import read_trajectory, write_trajectory
from .meshing import export_ply, load_mesh, load_point_ply, write_point_ply
from .pipeline import (
    PipelineConfig,
    format_umax,
    run_eval,
    run_fuse,
    run_mesh,
    run_solve,
    run_synth,
    sweep_values,
)
from .plotting import plot_convergence, plot_keyframe, plot_umax_sweep

logger = logging.getLogger("probfusion")

STAGES = ("synth", "solve", "fuse", "mesh", "eval", "pipeline")


def _parse_umax(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"u_max must be positive, got {text}")
    return v


def _parse_sweep(text: str) -> tuple:
    try:
        vals = tuple(_parse_umax(x) for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    if not vals:
        raise argparse.ArgumentTypeError("empty sweep")
    return vals


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path, help="artifact directory")
    common.add_argument("--umax", type=_parse_umax, help="uncertainty bound for meshing (inf allowed)")
    common.add_argument("--umax-sweep", type=_parse_sweep, help="comma-separated bounds, e.g. inf,1,0.1,0.01")
    common.add_argument("--weight-mode", choices=("inv-sigma", "inv-var", "constant"))
    common.add_argument("--filter", choices=("none", "droid"))
    common.add_argument("--dump-hessian", action="store_true", help="solve: also write hessian.hess")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="probfusion", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="stage", required=True)
    for name in STAGES:
        sub.add_parser(name, parents=[common])
    return parser


def resolve_config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    return cfg.with_overrides(
        seed=args.seed,
        out=str(args.out) if args.out else None,
        u_max=args.umax,
        u_max_sweep=args.umax_sweep,
        weight_mode=args.weight_mode,
        filter=args.filter,
    )


def _need(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing upstream artifact {path} (run `probfusion {stage}` first)")
    return path


def _write_csv(path: Path, rows: list[dict]) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (format_umax(v) if k == "u_max" else v) for k, v in row.items()})
    return path


def stage_synth(cfg: PipelineConfig, out: Path, args) -> None:
    res = run_synth(cfg)
    pio.save_graph(out / "graph.npz", res.graph)
    write_point_ply(res.gt_points, out / "gt_cloud.ply")
    write_trajectory(out / "trajectory_gt.txt", res.graph.truth.poses)
    print(f"factors={res.graph.n_factors}")
    print(f"gt_points={len(res.gt_points)}")


def stage_solve(cfg: PipelineConfig, out: Path, args) -> None:
    graph = pio.load_graph(_need(out / "graph.npz", "synth"))
    res = run_solve(cfg, graph)
    g = res.graph
    pio.save_npz(
        out / "solved.npz",
        poses=pio.poses_to_array(g.poses),
        inv_depth=g.inv_depth,
        inv_depth_var=res.inv_depth_var,
        costs=np.asarray(res.report.costs),
    )
    write_trajectory(out / "trajectory.txt", g.poses)
    (out / "depth").mkdir(exist_ok=True)
    (out / "lowres").mkdir(exist_ok=True)
    for k, img in enumerate(res.images):
        pio.write_depth_image(out / "depth" / f"kf_{k:03d}", img)
        pio.write_map(out / "lowres" / f"kf_{k:03d}.dmap", np.where(g.valid[k], g.inv_depth[k], np.nan), b"DMAP")
        pio.write_map(out / "lowres" / f"kf_{k:03d}.vmap", res.inv_depth_var[k], b"VMAP")
    if args.dump_hessian:
        from .ba import assemble

        pio.write_hessian(out / "hessian.hess", assemble(g, cfg.damping))
    rep = res.report
    rows = [
        {"iteration": i, "cost": c, "damping": rep.dampings[i] if i < len(rep.dampings) else "", "accepted": int(rep.accepted[i]) if i < len(rep.accepted) else ""}
        for i, c in enumerate(rep.costs)
    ]
    _write_csv(out / "convergence.csv", rows)
    plot_convergence(rep.costs, out / "convergence.png")
    k = g.n_frames // 2
    hw = g.hw
    wsum = np.bincount(g.pix[g.ii == k], weights=g.weight[g.ii == k, 0], minlength=hw)
    cnt = np.bincount(g.pix[g.ii == k], minlength=hw)
    with np.errstate(invalid="ignore", divide="ignore"):
        flow_w = (wsum / cnt).reshape(g.K.height, g.K.width)
    plot_keyframe(res.images[k].z, res.images[k].sigma, flow_w, out / f"keyframe_{k:03d}.png", f"keyframe {k}")
    print(f"iterations={rep.iterations}")
    print(f"initial_cost={rep.initial_cost:.9g}")
    print(f"final_cost={rep.final_cost:.9g}")
    print(f"converged={int(rep.converged)}")


def _load_keyframes(out: Path):
    _, poses = read_trajectory(_need(out / "trajectory.txt", "solve"))
    graph = pio.load_graph(_need(out / "graph.npz", "synth"))
    images = []
    for k in range(len(poses)):
        prefix = out / "depth" / f"kf_{k:03d}"
        _need(Path(str(prefix) + ".z.dmap"), "solve")
        _need(Path(str(prefix) + ".sigma.dmap"), "solve")
        images.append(pio.read_depth_image(prefix, k))
    return graph.K, poses, images


def stage_fuse(cfg: PipelineConfig, out: Path, args) -> None:
    K, poses, images = _load_keyframes(out)
    vol = run_fuse(cfg, poses, images, K)
    pio.write_tsdf(out / "tsdf.bin", vol)
    print(f"weight_mode={cfg.weight_mode}")
    print(f"filter={cfg.filter}")
    print(f"observed_voxels={int((vol.weight > 0).sum())}")


def _mesh_name(cfg: PipelineConfig, u: float) -> str:
    return f"mesh_umax_{format_umax(u)}.ply" if cfg.u_max_sweep else "mesh.ply"


def stage_mesh(cfg: PipelineConfig, out: Path, args) -> None:
    vol = pio.read_tsdf(_need(out / "tsdf.bin", "fuse"))
    rows = []
    for u in sweep_values(cfg):
        mesh = run_mesh(vol, u)
        export_ply(mesh, out / _mesh_name(cfg, u))
        rows.append({"u_max": u, "triangles": mesh.n_triangles, "vertices": mesh.n_vertices})
        print(f"u_max={format_umax(u)} triangles={mesh.n_triangles} vertices={mesh.n_vertices}")
    _write_csv(out / "meshes.csv", rows)


def stage_eval(cfg: PipelineConfig, out: Path, args) -> None:
    gt = load_point_ply(_need(out / "gt_cloud.ply", "synth"))
    rows = []
    for u in sweep_values(cfg):
        name = _mesh_name(cfg, u)
        mesh = load_mesh(_need(out / name, "mesh"))
        if mesh.n_triangles == 0:
            logger.warning("mesh %s is empty; skipping its evaluation", name)
            rows.append({"u_max": u, "triangles": 0, "accuracy_rmse": math.nan, "completeness_rmse": math.nan})
            continue
        rep = run_eval(cfg, mesh, gt)
        stem = "report" if not cfg.u_max_sweep else f"report_umax_{format_umax(u)}"
        rep.write(out, stem)
        rows.append(
            {
                "u_max": u,
                "triangles": mesh.n_triangles,
                "accuracy_rmse": f"{rep.accuracy_rmse:.9g}",
                "completeness_rmse": f"{rep.completeness_rmse:.9g}",
                "accuracy_mean": f"{rep.accuracy_mean:.9g}",
                "completeness_mean": f"{rep.completeness_mean:.9g}",
            }
        )
        sys.stdout.write(f"# u_max={format_umax(u)}\n" + rep.to_text())
    if cfg.u_max_sweep:
        _write_csv(out / "sweep.csv", rows)
        plot_umax_sweep(
            [{k: (float(v) if k != "u_max" else v) for k, v in r.items()} for r in rows], out / "sweep.png"
        )


HANDLERS = {"synth": stage_synth, "solve": stage_solve, "fuse": stage_fuse, "mesh": stage_mesh, "eval": stage_eval}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.ini").write_text(dump_config(cfg))
        stages = ["synth", "solve", "fuse", "mesh", "eval"] if args.stage == "pipeline" else [args.stage]
        for stage in stages:
            logger.info("stage %s", stage)
            HANDLERS[stage](cfg, out, args)
    except ProbFusionError as exc:
        print(f"probfusion {args.stage}: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"probfusion {args.stage}: I/O error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
