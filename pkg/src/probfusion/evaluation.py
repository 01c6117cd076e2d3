"""Mesh sampling, rigid ICP, nearest-neighbor accuracy/completeness, and the multi-view depth filter."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyCloud, EmptyMesh, InsufficientKeyframes, InsufficientPoints, NoCorrespondences
from .geometry import Intrinsics, Pose
from .meshing import TriangleMesh
from .upsample import DepthImage

DEFAULT_MAX_DIST = 0.5


@dataclass
class PointCloud:
    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud has non-finite coordinates")

    def __len__(self) -> int:
        return len(self.points)


def _as_points(cloud) -> np.ndarray:
    return cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float).reshape(-1, 3)


def sample_mesh(mesh: TriangleMesh, density: float = 1e4, seed: int = 0) -> PointCloud:
    """Uniform surface samples, ``round(area * density)`` per triangle.

    Raises:
        EmptyMesh: if the mesh has no triangles.
    """
    if not density > 0:
        raise ValueError("density must be positive")
    if mesh.n_triangles == 0:
        raise EmptyMesh("cannot sample a mesh without triangles")
    counts = np.floor(mesh.triangle_areas() * density + 0.5).astype(np.int64)
    tri = np.repeat(np.arange(mesh.n_triangles), counts)
    rng = np.random.Generator(np.random.Philox(seed))
    r1 = np.sqrt(rng.random(len(tri)))
    r2 = rng.random(len(tri))
    a, b, c = (mesh.vertices[mesh.triangles[tri, k]] for k in range(3))
    pts = (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c
    return PointCloud(pts)


def nearest_distances(query, reference) -> np.ndarray:
    """Distance from each query point to its nearest reference point."""
    q, r = _as_points(query), _as_points(reference)
    if len(q) == 0 or len(r) == 0:
        raise EmptyCloud("nearest-neighbor query on an empty cloud")
    d, _ = cKDTree(r).query(q, k=1)
    return d


def cloud_distance_rmse(source, target, max_dist: float = DEFAULT_MAX_DIST) -> float:
    """RMSE of nearest-neighbor distances from ``source`` to ``target``.

    Pairs farther than ``max_dist`` are discarded. Returns 0 if none remain.
    """
    d = nearest_distances(source, target)
    d = d[d <= max_dist]
    return float(np.sqrt(np.mean(d * d))) if len(d) else 0.0


def kabsch(src: np.ndarray, dst: np.ndarray) -> Pose:
    """Rigid transform minimizing ``sum |T src - dst|^2``."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    U, _, Vt = np.linalg.svd((src - mu_s).T @ (dst - mu_d))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    return Pose.from_rt(R, mu_d - R @ mu_s)


def icp_align(source, target, max_iters: int = 50, max_corr_dist: float = DEFAULT_MAX_DIST, tol: float = 1e-10) -> Pose:
    """Point-to-point ICP: the transform mapping ``source`` onto ``target``.

    Raises:
        InsufficientPoints: either cloud has fewer than 3 points.
        NoCorrespondences: no source point lies within ``max_corr_dist`` of the target.
    """
    src, dst = _as_points(source), _as_points(target)
    if len(src) < 3 or len(dst) < 3:
        raise InsufficientPoints("ICP needs at least 3 points per cloud")
    tree = cKDTree(dst)
    T = Pose.identity()
    prev = np.inf
    for _ in range(max_iters):
        moved = T.act(src)
        d, idx = tree.query(moved, k=1)
        ok = d <= max_corr_dist
        if ok.sum() < 3:
            raise NoCorrespondences(f"fewer than 3 correspondences within {max_corr_dist} m")
        err = float(np.sqrt(np.mean(d[ok] ** 2)))
        if err < tol or abs(prev - err) < tol:
            break
        prev = err
        T = kabsch(moved[ok], dst[idx[ok]]) @ T
    return T


@dataclass
class EvalReport:
    """Accuracy (estimate to ground truth) and completeness (ground truth to estimate)."""

    accuracy_rmse: float
    completeness_rmse: float
    accuracy_mean: float
    completeness_mean: float
    accuracy_inlier_fraction: float
    completeness_inlier_fraction: float
    n_estimate: int
    n_ground_truth: int
    max_dist: float = DEFAULT_MAX_DIST
    alignment: list = field(default_factory=lambda: np.eye(4).tolist())

    def as_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        lines = []
        for k, v in self.as_dict().items():
            if k == "alignment":
                v = ",".join(f"{x:.9g}" for x in np.ravel(v))
            elif isinstance(v, float):
                v = f"{v:.9g}"
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n"

    def write(self, out_dir, stem: str = "report") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        txt, js = out_dir / f"{stem}.txt", out_dir / f"{stem}.json"
        txt.write_text(self.to_text())
        js.write_text(self.to_json())
        return txt, js

    @classmethod
    def from_json(cls, text: str) -> EvalReport:
        return cls(**json.loads(text))


def _stats(d: np.ndarray, max_dist: float):
    ok = d <= max_dist
    if not ok.any():
        return 0.0, 0.0, 0.0
    return float(np.sqrt(np.mean(d[ok] ** 2))), float(d[ok].mean()), float(ok.mean())


def evaluate(estimate, ground_truth, max_dist: float = DEFAULT_MAX_DIST, align: bool = False) -> EvalReport:
    """Compare an estimated cloud against ground truth, optionally after ICP."""
    est, gt = _as_points(estimate), _as_points(ground_truth)
    if len(est) == 0 or len(gt) == 0:
        raise EmptyCloud("evaluation needs nonempty estimate and ground truth")
    T = icp_align(est, gt, max_corr_dist=max_dist) if align else Pose.identity()
    est = T.act(est)
    acc = _stats(nearest_distances(est, gt), max_dist)
    comp = _stats(nearest_distances(gt, est), max_dist)
    return EvalReport(
        accuracy_rmse=acc[0],
        completeness_rmse=comp[0],
        accuracy_mean=acc[1],
        completeness_mean=comp[1],
        accuracy_inlier_fraction=acc[2],
        completeness_inlier_fraction=comp[2],
        n_estimate=len(est),
        n_ground_truth=len(gt),
        max_dist=float(max_dist),
        alignment=T.matrix().tolist(),
    )


def droid_filter(
    images: list[DepthImage],
    poses: list[Pose],
    K: Intrinsics,
    threshold: float = 0.005,
    min_support: int = 2,
    window: int = 3,
) -> list[DepthImage]:
    """Keep depths that neighboring frames reproduce in inverse depth.

    A pixel of frame ``i`` is reprojected into every frame ``j`` with
    ``0 < |i - j| <= window``; it gains support when the inverse depth of the
    reprojected point is within ``threshold`` of frame ``j``'s inverse depth at
    the nearest pixel. The frame itself counts as one vote. Pixels with fewer
    than ``min_support`` votes, or with depth below half the frame's mean
    depth, are dropped. Kept pixels get ``sigma = 1``.
    """
    n = len(images)
    if n < 2 or len(poses) != n:
        raise InsufficientKeyframes("depth filter needs at least two keyframes with poses")
    pix = K.pixel_grid()
    rays = K.rays(pix)
    out = []
    for i, img in enumerate(images):
        valid = img.valid.reshape(-1)
        z = img.z.reshape(-1)
        pts = poses[i].act(rays * np.where(valid, z, 1.0)[:, None])
        support = valid.astype(np.int64)
        for j in range(max(0, i - window), min(n, i + window + 1)):
            if j == i:
                continue
            pc = poses[j].inverse().act(pts)
            zc = pc[:, 2]
            front = zc > 1e-8
            zs = np.where(front, zc, 1.0)
            u = np.rint(K.fx * pc[:, 0] / zs + K.cx)
            v = np.rint(K.fy * pc[:, 1] / zs + K.cy)
            inside = front & valid & (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
            ui = np.where(inside, u, 0).astype(np.int64)
            vi = np.where(inside, v, 0).astype(np.int64)
            zj = images[j].z[vi, ui]
            okj = inside & images[j].valid[vi, ui]
            with np.errstate(divide="ignore", invalid="ignore"):
                agree = okj & (np.abs(1.0 / zs - 1.0 / zj) < threshold)
            support += agree
        keep = valid & (support >= min_support)
        if valid.any():
            keep &= z >= 0.5 * z[valid].mean()
        keep = keep.reshape(img.z.shape)
        out.append(
            DepthImage(np.where(keep, img.z, np.nan), np.where(keep, 1.0, np.nan), img.keyframe)
        )
    return out
