"""Dense inverse-depth BA with marginal depth uncertainty and uncertainty-weighted TSDF meshing."""

from .ba import BlockSparseHessian, FactorGraph, optimize
from .covariance import depth_marginal_variances, pose_covariance
from .evaluation import EvalReport, PointCloud, cloud_distance_rmse, droid_filter, icp_align, sample_mesh
from .geometry import Intrinsics, Pose, se3_exp, se3_log
from .meshing import TriangleMesh, export_ply, extract_mesh
from .pipeline import PipelineConfig
from .tsdf import FusionWeightMode, TsdfVolume
from .upsample import ConvexWeightField, DepthImage, convex_upsample, invdepth_to_depth

__all__ = [
    "BlockSparseHessian",
    "ConvexWeightField",
    "DepthImage",
    "EvalReport",
    "FactorGraph",
    "FusionWeightMode",
    "Intrinsics",
    "PipelineConfig",
    "PointCloud",
    "Pose",
    "TriangleMesh",
    "TsdfVolume",
    "cloud_distance_rmse",
    "convex_upsample",
    "depth_marginal_variances",
    "droid_filter",
    "export_ply",
    "extract_mesh",
    "icp_align",
    "invdepth_to_depth",
    "optimize",
    "pose_covariance",
    "sample_mesh",
    "se3_exp",
    "se3_log",
]
