"""Stage functions chaining synthesis, BA, covariance, upsampling, fusion, meshing and evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import ba
from .covariance import depth_marginal_variances
from .evaluation import EvalReport, droid_filter, evaluate, sample_mesh
from .geometry import Intrinsics, Pose
from .meshing import TriangleMesh, extract_mesh
from .scene import NoiseModel, default_scene, default_trajectory, ground_truth_cloud, synthesize_factor_graph
from .tsdf import FusionWeightMode, TsdfVolume
from .upsample import ConvexWeightField, DepthImage, upsample_keyframe

logger = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    """Every tunable of a run; see :mod:`probfusion.config` for the file schema."""

    seed: int = 0
    out: str = "out"
    # scene
    n_keyframes: int = 24
    orbit_x: float = 2.2
    orbit_y: float = 1.8
    camera_height: float = 1.5
    # noise
    sigma_flow: float = 0.1
    masks: tuple = ((0, 0, 18, 12),)
    mask_inflation: float = 100.0
    textureless_surfaces: tuple = (1,)
    outlier_fraction: float = 0.2
    outlier_flow: float = 0.5
    pose_noise_rot: float = 0.05
    pose_noise_trans: float = 0.05
    depth_noise: float = 0.2
    # bundle adjustment
    width: int = 69
    height: int = 44
    hfov: float = 90.0
    window: int = 3
    damping: float = 1e-4
    iterations: int = 20
    schedule: str = "adaptive"
    gauge: tuple = (0, 1)
    # upsampling
    upsample_factor: int = 8
    upsample_weights: str = "bilinear"
    # fusion
    weight_mode: str = "inv-sigma"
    truncation: float = 0.1
    voxel_size: float = 0.05
    filter: str = "none"
    filter_threshold: float = 0.005
    filter_min_support: int = 2
    # meshing
    u_max: float = 0.1
    u_max_sweep: tuple = ()
    # evaluation
    eval_density: float = 1e4
    max_dist: float = 0.5
    icp: bool = False

    def intrinsics(self) -> Intrinsics:
        return Intrinsics.from_fov(self.width, self.height, self.hfov)

    def noise(self) -> NoiseModel:
        return NoiseModel(
            sigma_flow=self.sigma_flow,
            masks=tuple(tuple(m) for m in self.masks),
            mask_inflation=self.mask_inflation,
            textureless_surfaces=tuple(self.textureless_surfaces),
            outlier_fraction=self.outlier_fraction,
            outlier_flow=self.outlier_flow,
            pose_noise_rot=self.pose_noise_rot,
            pose_noise_trans=self.pose_noise_trans,
            depth_noise=self.depth_noise,
            seed=self.seed,
        )

    def trajectory(self) -> list[Pose]:
        return default_trajectory(self.n_keyframes, (self.orbit_x, self.orbit_y), self.camera_height)

    def with_overrides(self, **kw) -> PipelineConfig:
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


@dataclass
class SynthResult:
    graph: ba.FactorGraph
    gt_points: np.ndarray


@dataclass
class SolveResult:
    graph: ba.FactorGraph
    report: ba.ConvergenceReport
    inv_depth_var: np.ndarray
    images: list[DepthImage] = field(default_factory=list)

    @property
    def poses(self) -> list[Pose]:
        return self.graph.poses


def run_synth(cfg: PipelineConfig) -> SynthResult:
    scene = default_scene()
    traj = cfg.trajectory()
    K = cfg.intrinsics()
    graph = synthesize_factor_graph(scene, traj, K, cfg.noise(), cfg.window, gauge=cfg.gauge)
    gt = ground_truth_cloud(scene, traj, K, cfg.eval_density, seed=cfg.seed)
    return SynthResult(graph, gt)


def weight_field(cfg: PipelineConfig, K: Intrinsics) -> ConvexWeightField:
    shape = (K.height, K.width)
    if cfg.upsample_weights == "onehot":
        return ConvexWeightField.onehot(shape, cfg.upsample_factor)
    return ConvexWeightField.bilinear(shape, cfg.upsample_factor)


def run_solve(cfg: PipelineConfig, graph: ba.FactorGraph) -> SolveResult:
    """LM to convergence, then marginal variances at the base damping."""
    graph.validate()
    solved, report = ba.optimize(graph, max_iters=cfg.iterations, damping=cfg.damping, schedule=cfg.schedule)
    # covariance of the final state, not of whatever damping LM ended on
    H = ba.assemble(solved, cfg.damping)
    red = ba.schur_reduce(H)
    var = depth_marginal_variances(H, red.L)
    var = np.where(solved.valid, var, np.nan)
    wf = weight_field(cfg, graph.K)
    d = np.where(solved.valid, solved.inv_depth, np.nan)
    images = [upsample_keyframe(d[k], var[k], wf, keyframe=k) for k in range(solved.n_frames)]
    return SolveResult(solved, report, var, images)


def run_fuse(
    cfg: PipelineConfig, poses: list[Pose], images: list[DepthImage], K_low: Intrinsics
) -> TsdfVolume:
    """Integrate every keyframe into a volume enclosing the room."""
    K = K_low.scaled(cfg.upsample_factor)
    mode = FusionWeightMode.parse(cfg.weight_mode)
    if cfg.filter == "droid":
        images = droid_filter(
            images, poses, K, cfg.filter_threshold, cfg.filter_min_support, cfg.window
        )
    scene = default_scene()
    vol = TsdfVolume.enclosing(scene.room.lo, scene.room.hi, cfg.voxel_size, cfg.truncation)
    for pose, img in zip(poses, images):
        vol.integrate(img, pose, K, mode)
    return vol


def run_mesh(vol: TsdfVolume, u_max: float) -> TriangleMesh:
    return extract_mesh(vol, u_max)


def run_eval(cfg: PipelineConfig, mesh: TriangleMesh, gt_points: np.ndarray) -> EvalReport:
    est = sample_mesh(mesh, cfg.eval_density, seed=cfg.seed + 1)
    return evaluate(est, gt_points, cfg.max_dist, align=cfg.icp)


def sweep_values(cfg: PipelineConfig) -> list[float]:
    return list(cfg.u_max_sweep) if cfg.u_max_sweep else [cfg.u_max]


def format_umax(u: float) -> str:
    return "inf" if math.isinf(u) else f"{u:g}"
