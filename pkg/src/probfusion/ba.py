"""Dense inverse-depth bundle adjustment on the arrow-structured normal equations.

Variables are one twist per free keyframe and one inverse depth per low-res
pixel per keyframe. Each flow factor ties pixel ``p`` of frame ``i`` (and its
inverse depth) to a measured correspondence in frame ``j``, so the depth
block ``P`` of the Hessian is diagonal and the system can be reduced onto the
poses with a Schur complement::

    [C  E] [dxi]   [v]
    [E' P] [dd ] = [w]
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .errors import DivergenceDetected, EmptyGraph, NotPositiveDefinite
from .geometry import EPS_DEPTH, Intrinsics, Pose, relative_flow_jacobians

logger = logging.getLogger(__name__)

MIN_INV_DEPTH = 1e-4
MAX_INV_DEPTH = 1e3
MIN_DEPTH_INFO = 1e-10
ZERO_WEIGHT_PRIOR = 1e-6
DIAG_GUARD = 1e-6


@dataclass
class SynthTruth:
    """Ground truth kept alongside a synthetic graph."""

    poses: list[Pose]
    inv_depth: np.ndarray
    pixel_sigma: np.ndarray
    textureless: np.ndarray
    outlier: np.ndarray


@dataclass
class FactorGraph:
    """Keyframe poses, per-pixel inverse depths and weighted flow factors.

    Factor arrays are parallel, one entry per factor: source frame ``ii``,
    target frame ``jj``, flat pixel index ``pix`` into frame ``ii``, the
    measured pixel ``target`` in frame ``jj`` and per-axis ``weight``.
    """

    K: Intrinsics
    poses: list[Pose]
    inv_depth: np.ndarray
    valid: np.ndarray
    ii: np.ndarray
    jj: np.ndarray
    pix: np.ndarray
    target: np.ndarray
    weight: np.ndarray
    gauge: frozenset = frozenset({0})
    truth: SynthTruth | None = None

    def __post_init__(self):
        self.gauge = frozenset(int(g) for g in self.gauge)
        self.inv_depth = np.asarray(self.inv_depth, dtype=float)
        self.valid = np.asarray(self.valid, dtype=bool)
        self.ii = np.asarray(self.ii, dtype=np.int64)
        self.jj = np.asarray(self.jj, dtype=np.int64)
        self.pix = np.asarray(self.pix, dtype=np.int64)
        self.target = np.asarray(self.target, dtype=float).reshape(-1, 2)
        self.weight = np.asarray(self.weight, dtype=float).reshape(-1, 2)

    @property
    def n_frames(self) -> int:
        return len(self.poses)

    @property
    def n_factors(self) -> int:
        return len(self.ii)

    @property
    def hw(self) -> int:
        return self.K.width * self.K.height

    @property
    def free_poses(self) -> tuple[int, ...]:
        return tuple(k for k in range(self.n_frames) if k not in self.gauge)

    def validate(self) -> None:
        n = self.n_frames
        if n == 0:
            raise EmptyGraph("graph has no keyframes")
        if self.inv_depth.shape != (n, self.K.height, self.K.width):
            raise ValueError(f"inv_depth shape {self.inv_depth.shape} does not match frames/intrinsics")
        if 0 not in self.gauge:
            raise ValueError("gauge must contain pose 0")
        if any(g < 0 or g >= n for g in self.gauge):
            raise ValueError("gauge references a missing pose")
        m = self.n_factors
        if not (len(self.jj) == len(self.pix) == len(self.target) == len(self.weight) == m):
            raise ValueError("factor arrays have inconsistent lengths")
        if m:
            if self.ii.min() < 0 or self.ii.max() >= n or self.jj.min() < 0 or self.jj.max() >= n:
                raise ValueError("factor references a missing frame")
            if np.any(self.ii == self.jj):
                raise ValueError("factor connects a frame to itself")
            if self.pix.min() < 0 or self.pix.max() >= self.hw:
                raise ValueError("factor references a pixel outside the grid")
            if np.any(self.weight < 0):
                raise ValueError("factor weights must be nonnegative")

    def with_state(self, poses: list[Pose], inv_depth: np.ndarray) -> FactorGraph:
        return replace(self, poses=list(poses), inv_depth=np.array(inv_depth, dtype=float))

    def depth_index(self) -> np.ndarray:
        """Global inverse-depth variable index of every factor."""
        return self.ii * self.hw + self.pix


@dataclass
class BlockSparseHessian:
    """Damped arrow system ``{C, E, P, v, w}`` over free poses and depths.

    Attributes:
        C: dense ``(6m, 6m)`` pose block, ``m`` free poses.
        E: sparse ``(6m, n)`` pose-depth coupling.
        P: ``(n,)`` diagonal of the depth block.
        v, w: right-hand sides for poses and depths.
        damping: the Levenberg factor already folded into ``C`` and ``P``.
        depth_weight: undamped factor information per depth; pixels below
            1e-10 carry no measurement and are reported invalid.
        depth_shape: shape used to reshape per-depth outputs.
    """

    C: np.ndarray
    E: sp.csr_matrix
    P: np.ndarray
    v: np.ndarray
    w: np.ndarray
    damping: float = 0.0
    free_poses: tuple = ()
    depth_weight: np.ndarray | None = None
    depth_shape: tuple | None = None

    def __post_init__(self):
        self.C = np.asarray(self.C, dtype=float)
        self.E = sp.csr_matrix(self.E, dtype=float)
        self.P = np.asarray(self.P, dtype=float).ravel()
        self.v = np.asarray(self.v, dtype=float).ravel()
        self.w = np.asarray(self.w, dtype=float).ravel()
        npose, ndep = self.C.shape[0], self.P.size
        if self.C.shape != (npose, npose) or self.E.shape != (npose, ndep):
            raise ValueError("inconsistent block dimensions")
        if self.v.size != npose or self.w.size != ndep:
            raise ValueError("right-hand side does not match block dimensions")
        if self.depth_weight is None:
            self.depth_weight = self.P.copy()
        if self.depth_shape is None:
            self.depth_shape = (ndep,)

    @property
    def n_pose_vars(self) -> int:
        return self.C.shape[0]

    @property
    def n_depths(self) -> int:
        return self.P.size

    def dense(self) -> np.ndarray:
        """Full ``H`` as a dense matrix; only meant for small oracle checks."""
        E = self.E.toarray()
        return np.block([[self.C, E], [E.T, np.diag(self.P)]])

    def rhs(self) -> np.ndarray:
        return np.concatenate([self.v, self.w])


@dataclass
class ReducedSystem:
    S: np.ndarray
    rhs: np.ndarray
    L: np.ndarray


@dataclass
class Linearization:
    """Undamped normal equations plus the cost they were built at."""

    hessian: BlockSparseHessian
    cost: float


def _factor_frame_state(graph: FactorGraph):
    R = np.stack([p.rotation for p in graph.poses])
    t = np.stack([p.translation for p in graph.poses])
    d = graph.inv_depth.reshape(graph.n_frames, -1)[graph.ii, graph.pix]
    pixels = np.stack([graph.pix % graph.K.width, graph.pix // graph.K.width], axis=1).astype(float)
    return R, t, d, pixels


def predict_flow(graph: FactorGraph):
    """Predicted correspondence of every factor plus Jacobians and frame-j depth."""
    R, t, d, pixels = _factor_frame_state(graph)
    # relative transforms per frame pair, then gathered per factor
    R_rel = np.einsum("akr,bkc->abrc", R, R)
    t_rel = np.einsum("akr,abk->abr", R, t[None, :, :] - t[:, None, :])
    ii, jj = graph.ii, graph.jj
    return relative_flow_jacobians(R_rel[jj, ii], t_rel[jj, ii], pixels, d, graph.K)


def residuals(graph: FactorGraph, with_jacobians: bool = False):
    """Flow residuals ``predicted - measured``; factors landing behind frame j get weight 0."""
    uv, J_i, J_j, J_d, z = predict_flow(graph)
    r = uv - graph.target
    active = z > EPS_DEPTH
    W = np.where(active[:, None], graph.weight, 0.0)
    r = np.where(active[:, None], r, 0.0)
    if with_jacobians:
        return r, W, J_i, J_j, J_d
    return r, W


def cost(graph: FactorGraph) -> float:
    """Weighted squared flow error ``sum r' W r``."""
    if graph.n_factors == 0:
        return 0.0
    r, W = residuals(graph)
    return float(np.sum(W * r * r))


def linearize(graph: FactorGraph) -> Linearization:
    """Gauss-Newton normal equations at the graph's current state (no damping)."""
    graph.validate()
    free = graph.free_poses
    n_free = len(free)
    n_dep = graph.n_frames * graph.hw
    if n_free == 0 and n_dep == 0:
        raise EmptyGraph("graph has no free variables")

    col = np.full(graph.n_frames, -1, dtype=np.int64)
    col[list(free)] = np.arange(n_free)
    npv = 6 * n_free

    C = np.zeros((npv, npv))
    v = np.zeros(npv)
    P = np.zeros(n_dep)
    w = np.zeros(n_dep)
    E = sp.csr_matrix((npv, n_dep))
    total = 0.0

    if graph.n_factors:
        r, W, J_i, J_j, J_d = residuals(graph, with_jacobians=True)
        total = float(np.sum(W * r * r))
        g = graph.depth_index()
        WJd = W * J_d
        P = np.bincount(g, weights=np.sum(WJd * J_d, axis=1), minlength=n_dep)
        w = -np.bincount(g, weights=np.sum(WJd * r, axis=1), minlength=n_dep)

        ci, cj = col[graph.ii], col[graph.jj]
        sqW = np.sqrt(W)
        A = sqW[:, :, None] * np.concatenate([J_i, J_j], axis=2)
        Ar = sqW * r
        # E entries: [J_i J_j]' W J_d, one 12-vector per factor
        e = np.einsum("nkr,nk->nr", A, sqW * J_d)
        rows, cols, vals = [], [], []
        for ca, sl in ((ci, slice(0, 6)), (cj, slice(6, 12))):
            ma = ca >= 0
            rows.append(((6 * ca[ma])[:, None] + np.arange(6)).ravel())
            cols.append(np.repeat(g[ma], 6))
            vals.append(e[ma, sl].ravel())

        # pose blocks: one dense product per (i, j) frame pair
        pair = graph.ii * graph.n_frames + graph.jj
        order = np.argsort(pair, kind="stable")
        keys, starts = np.unique(pair[order], return_index=True)
        stops = np.append(starts[1:], len(order))
        for key, a, b in zip(keys, starts, stops):
            sel = order[a:b]
            Ak = A[sel].reshape(-1, 12)
            blk = Ak.T @ Ak
            grad = Ak.T @ Ar[sel].ravel()
            fi, fj = col[key // graph.n_frames], col[key % graph.n_frames]
            for fa, sa in ((fi, slice(0, 6)), (fj, slice(6, 12))):
                if fa < 0:
                    continue
                v[6 * fa : 6 * fa + 6] -= grad[sa]
                for fb, sb in ((fi, slice(0, 6)), (fj, slice(6, 12))):
                    if fb >= 0:
                        C[6 * fa : 6 * fa + 6, 6 * fb : 6 * fb + 6] += blk[sa, sb]
        C = 0.5 * (C + C.T)
        if any(len(rw) for rw in rows):
            E = sp.coo_matrix(
                (np.concatenate(vals).ravel(), (np.concatenate(rows).ravel(), np.concatenate(cols).ravel())),
                shape=(npv, n_dep),
            ).tocsr()
            E.sum_duplicates()

    H = BlockSparseHessian(
        C=C,
        E=E,
        P=P,
        v=v,
        w=w,
        damping=0.0,
        free_poses=free,
        depth_weight=P.copy(),
        depth_shape=(graph.n_frames, graph.K.height, graph.K.width),
    )
    return Linearization(H, total)


def apply_damping(H: BlockSparseHessian, lam: float) -> BlockSparseHessian:
    """Levenberg damping ``lam * diag(H)`` with guards for unobserved variables."""
    if lam < 0:
        raise ValueError("damping must be nonnegative")
    C = H.C.copy()
    diag = np.diag(C)
    C[np.diag_indices_from(C)] = diag + lam * np.maximum(diag, DIAG_GUARD)
    P = np.where(H.P >= MIN_DEPTH_INFO, H.P, H.P + ZERO_WEIGHT_PRIOR)
    P = P * (1.0 + lam)
    return replace(H, C=C, P=P, damping=lam)


def assemble(graph: FactorGraph, damping: float = 1e-4) -> BlockSparseHessian:
    """Damped normal equations ``H x = b`` with ``b = -sum J' W r`` (gauge poses removed)."""
    return apply_damping(linearize(graph).hessian, damping)


def schur_reduce(H: BlockSparseHessian) -> ReducedSystem:
    """Eliminate depths: ``S = C - E P^-1 E'`` and ``rhs = v - E P^-1 w``."""
    if np.any(H.P <= 0):
        raise NotPositiveDefinite("depth block has nonpositive entries")
    Pinv = 1.0 / H.P
    EP = H.E @ sp.diags(Pinv)
    S = H.C - (EP @ H.E.T).toarray()
    S = 0.5 * (S + S.T)
    rhs = H.v - H.E @ (Pinv * H.w)
    if S.shape[0] == 0:
        return ReducedSystem(S, rhs, np.zeros((0, 0)))
    try:
        L = scipy.linalg.cholesky(S, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite("reduced camera matrix is not positive definite; raise the damping") from exc
    return ReducedSystem(S, rhs, L)


def solve_poses(red: ReducedSystem) -> np.ndarray:
    """Forward then back substitution with the Cholesky factor of ``S``."""
    if red.L.shape[0] == 0:
        return np.zeros(0)
    y = scipy.linalg.solve_triangular(red.L, red.rhs, lower=True)
    return scipy.linalg.solve_triangular(red.L.T, y, lower=False)


def solve_depths(H: BlockSparseHessian, dxi: np.ndarray) -> np.ndarray:
    """Back-substitute ``dd = P^-1 (w - E' dxi)``."""
    return (H.w - H.E.T @ dxi) / H.P


def solve(H: BlockSparseHessian) -> tuple[np.ndarray, np.ndarray, ReducedSystem]:
    red = schur_reduce(H)
    dxi = solve_poses(red)
    return dxi, solve_depths(H, dxi), red


def retract(graph: FactorGraph, dxi: np.ndarray, dd: np.ndarray) -> FactorGraph:
    poses = list(graph.poses)
    for n, k in enumerate(graph.free_poses):
        poses[k] = poses[k].retract(dxi[6 * n : 6 * n + 6])
    d = graph.inv_depth.ravel() + dd
    d = np.clip(d, MIN_INV_DEPTH, MAX_INV_DEPTH).reshape(graph.inv_depth.shape)
    return graph.with_state(poses, d)


@dataclass
class ConvergenceReport:
    costs: list[float] = field(default_factory=list)
    step_norms: list[float] = field(default_factory=list)
    dampings: list[float] = field(default_factory=list)
    accepted: list[bool] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    final_damping: float = 0.0

    @property
    def initial_cost(self) -> float:
        return self.costs[0]

    @property
    def final_cost(self) -> float:
        return self.costs[-1]


def optimize(
    graph: FactorGraph,
    max_iters: int = 20,
    damping: float = 1e-4,
    schedule: str = "adaptive",
    tol: float = 1e-6,
    max_damping: float = 1e8,
) -> tuple[FactorGraph, ConvergenceReport]:
    """Levenberg-Marquardt over poses and inverse depths.

    ``schedule="adaptive"`` rejects cost-increasing steps and multiplies the
    damping by 10 (dividing it back on acceptance, never below ``damping``),
    so the reported cost sequence is non-increasing. ``schedule="fixed"``
    keeps ``damping`` constant and accepts every step; three consecutive
    cost increases then raise :class:`DivergenceDetected`.

    ``report.costs`` holds the initial cost followed by the cost after each
    accepted step.
    """
    if schedule not in ("adaptive", "fixed"):
        raise ValueError(f"unknown damping schedule {schedule!r}")
    lin = linearize(graph)
    report = ConvergenceReport(costs=[lin.cost])
    lam = damping
    growth = 0

    for it in range(max_iters):
        report.iterations = it + 1
        try:
            dxi, dd, _ = solve(apply_damping(lin.hessian, lam))
        except NotPositiveDefinite:
            if schedule == "fixed" or lam * 10 > max_damping:
                raise
            lam *= 10
            report.accepted.append(False)
            report.dampings.append(lam)
            report.step_norms.append(float("nan"))
            continue
        step = float(np.sqrt(dxi @ dxi + dd @ dd))
        candidate = retract(graph, dxi, dd)
        new_cost = cost(candidate)
        report.step_norms.append(step)
        report.dampings.append(lam)

        accept = schedule == "fixed" or new_cost <= lin.cost
        report.accepted.append(accept)
        if accept:
            growth = growth + 1 if new_cost > lin.cost else 0
            graph = candidate
            report.costs.append(new_cost)
            if growth >= 3:
                raise DivergenceDetected(f"cost grew for 3 consecutive steps (now {new_cost:.6g})")
            if schedule == "adaptive":
                lam = max(lam / 10.0, damping)
            if step < tol:
                report.converged = True
                break
            lin = linearize(graph)
        else:
            if step < tol:
                report.converged = True
                break
            lam *= 10.0
            if lam > max_damping:
                break
        logger.debug("iter %d cost %.6g step %.3g lambda %.1e", it, report.costs[-1], step, lam)

    report.final_damping = lam
    return graph, report
