"""SE(3) poses, pinhole intrinsics and the analytic flow-residual Jacobians.

Conventions:
    * A twist is a 6-vector ``(wx, wy, wz, vx, vy, vz)``: rotation first.
    * Poses are camera-to-world unless stated otherwise.
    * Pose updates are right-multiplicative, ``T <- T @ exp(dxi)``.
    * Quaternions are stored scalar-last ``(qx, qy, qz, qw)`` as in TUM files.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import FormatError, NonPositiveDepth, NonPositiveInverseDepth

EPS_DEPTH = 1e-8


def hat(w: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix of one 3-vector or a stack ``(..., 3)``."""
    w = np.asarray(w, dtype=float)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


@dataclass(frozen=True)
class Pose:
    """Rigid transform stored as a unit quaternion plus translation."""

    quat: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.quat, dtype=float).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n < 1e-12:
            raise ValueError("quaternion must be finite and nonzero")
        q = q / n
        # canonical hemisphere keeps serialization deterministic
        if q[3] < 0:
            q = -q
        t = np.asarray(self.translation, dtype=float).reshape(3).copy()
        q.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "quat", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls()

    @classmethod
    def from_rt(cls, rotation: np.ndarray, translation) -> Pose:
        return cls(Rotation.from_matrix(np.asarray(rotation, dtype=float)).as_quat(), translation)

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> Pose:
        T = np.asarray(T, dtype=float)
        return cls.from_rt(T[:3, :3], T[:3, 3])

    @property
    def rotation(self) -> np.ndarray:
        return Rotation.from_quat(self.quat).as_matrix()

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> Pose:
        R = self.rotation
        return Pose.from_rt(R.T, -R.T @ self.translation)

    def compose(self, other: Pose) -> Pose:
        R = self.rotation
        return Pose.from_rt(R @ other.rotation, R @ other.translation + self.translation)

    def __matmul__(self, other: Pose) -> Pose:
        return self.compose(other)

    def act(self, points: np.ndarray) -> np.ndarray:
        """Apply the transform to a point or an ``(N, 3)`` stack."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def retract(self, twist: np.ndarray) -> Pose:
        return self.compose(se3_exp(twist))


def se3_exp(twist: np.ndarray) -> Pose:
    """Exponential map from a ``(w, v)`` twist to a pose."""
    twist = np.asarray(twist, dtype=float).reshape(6)
    w, v = twist[:3], twist[3:]
    theta = np.linalg.norm(w)
    W = hat(w)
    W2 = W @ W
    if theta < 1e-6:
        # Taylor expansions of the Rodrigues coefficients
        a = 1.0 - theta**2 / 6.0
        b = 0.5 - theta**2 / 24.0
        c = 1.0 / 6.0 - theta**2 / 120.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta**2
        c = (theta - np.sin(theta)) / theta**3
    R = np.eye(3) + a * W + b * W2
    V = np.eye(3) + b * W + c * W2
    return Pose.from_rt(R, V @ v)


def se3_log(pose: Pose) -> np.ndarray:
    """Inverse of :func:`se3_exp` for rotation angles below pi."""
    w = Rotation.from_quat(pose.quat).as_rotvec()
    theta = np.linalg.norm(w)
    W = hat(w)
    if theta < 1e-6:
        coef = 1.0 / 12.0 + theta**2 / 720.0
    else:
        coef = (1.0 - theta * np.sin(theta) / (2.0 * (1.0 - np.cos(theta)))) / theta**2
    V_inv = np.eye(3) - 0.5 * W + coef * (W @ W)
    return np.concatenate([w, V_inv @ pose.translation])


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera; pixel centers sit at integer coordinates."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def from_fov(cls, width: int, height: int, hfov_deg: float = 90.0) -> Intrinsics:
        f = 0.5 * width / np.tan(np.deg2rad(hfov_deg) / 2.0)
        return cls(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, factor: int) -> Intrinsics:
        """Intrinsics of the image upsampled by an integer factor.

        Low-res pixel ``u`` covers high-res pixels ``factor*u ... factor*u + factor-1``.
        """
        s = factor
        return Intrinsics(
            self.fx * s,
            self.fy * s,
            s * (self.cx + 0.5) - 0.5,
            s * (self.cy + 0.5) - 0.5,
            self.width * s,
            self.height * s,
        )

    def pixel_grid(self) -> np.ndarray:
        """All pixel coordinates ``(h*w, 2)`` in row-major order."""
        v, u = np.mgrid[0 : self.height, 0 : self.width]
        return np.stack([u.ravel(), v.ravel()], axis=1).astype(float)

    def rays(self, pixels: np.ndarray | None = None) -> np.ndarray:
        """Camera-frame ray directions with unit z component."""
        if pixels is None:
            pixels = self.pixel_grid()
        pixels = np.asarray(pixels, dtype=float)
        x = (pixels[..., 0] - self.cx) / self.fx
        y = (pixels[..., 1] - self.cy) / self.fy
        return np.stack([x, y, np.ones_like(x)], axis=-1)


def project(point_cam: np.ndarray, K: Intrinsics) -> np.ndarray:
    """Pinhole projection of one point or an ``(N, 3)`` stack."""
    p = np.asarray(point_cam, dtype=float)
    z = p[..., 2]
    if np.any(z <= EPS_DEPTH):
        raise NonPositiveDepth("point at or behind the camera plane")
    return np.stack([K.fx * p[..., 0] / z + K.cx, K.fy * p[..., 1] / z + K.cy], axis=-1)


def backproject(pixel: np.ndarray, d, K: Intrinsics) -> np.ndarray:
    """Camera-frame point at depth ``1/d`` along the ray through ``pixel``."""
    d = np.asarray(d, dtype=float)
    if np.any(d <= 0):
        raise NonPositiveInverseDepth("inverse depth must be positive")
    return K.rays(pixel) / d[..., None]


def flow_residual_jacobians(
    R_i: np.ndarray,
    t_i: np.ndarray,
    R_j: np.ndarray,
    t_j: np.ndarray,
    pixels: np.ndarray,
    d: np.ndarray,
    K: Intrinsics,
):
    """Reprojection of pixels of frame i into frame j with analytic derivatives.

    All inputs are stacked per factor: ``R_* (N, 3, 3)``, ``t_* (N, 3)``,
    ``pixels (N, 2)``, ``d (N,)``. Poses are camera-to-world.

    Returns:
        uv: ``(N, 2)`` predicted pixel in frame j.
        J_i, J_j: ``(N, 2, 6)`` derivatives w.r.t. right-multiplied twists.
        J_d: ``(N, 2)`` derivative w.r.t. the inverse depth.
        z_j: ``(N,)`` depth of the point in frame j (callers mask ``z_j <= eps``).
    """
    R_ji = np.einsum("nkr,nkc->nrc", R_j, R_i)
    t_ji = np.einsum("nkr,nk->nr", R_j, t_i - t_j)
    return relative_flow_jacobians(R_ji, t_ji, pixels, d, K)


def relative_flow_jacobians(R_ji: np.ndarray, t_ji: np.ndarray, pixels: np.ndarray, d: np.ndarray, K: Intrinsics):
    """Same as :func:`flow_residual_jacobians` given the stacked relative transform ``T_j^-1 T_i``."""
    ray = K.rays(pixels)
    X = ray / d[:, None]
    Y = np.einsum("nrc,nc->nr", R_ji, X) + t_ji

    z = Y[:, 2]
    zs = np.where(np.abs(z) > EPS_DEPTH, z, EPS_DEPTH)
    inv_z = 1.0 / zs
    uv = np.stack([K.fx * Y[:, 0] * inv_z + K.cx, K.fy * Y[:, 1] * inv_z + K.cy], axis=1)

    n = len(d)
    dpi = np.zeros((n, 2, 3))
    dpi[:, 0, 0] = K.fx * inv_z
    dpi[:, 0, 2] = -K.fx * Y[:, 0] * inv_z**2
    dpi[:, 1, 1] = K.fy * inv_z
    dpi[:, 1, 2] = -K.fy * Y[:, 1] * inv_z**2

    dY_i = np.concatenate([-R_ji @ hat(X), R_ji], axis=2)
    dY_j = np.concatenate([hat(Y), -np.broadcast_to(np.eye(3), (n, 3, 3))], axis=2)
    dY_d = np.einsum("nrc,nc->nr", R_ji, -ray / (d**2)[:, None])

    J_i = dpi @ dY_i
    J_j = dpi @ dY_j
    J_d = np.einsum("nrc,nc->nr", dpi, dY_d)
    return uv, J_i, J_j, J_d, z


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera-to-world pose with +z toward ``target`` and +y pointing down."""
    eye = np.asarray(eye, dtype=float)
    fwd = np.asarray(target, dtype=float) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=float))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return Pose.from_rt(np.stack([right, down, fwd], axis=1), eye)


def write_trajectory(path, poses: list[Pose], timestamps=None) -> None:
    """TUM trajectory: ``timestamp tx ty tz qx qy qz qw`` per line."""
    if timestamps is None:
        timestamps = range(len(poses))
    lines = []
    for ts, pose in zip(timestamps, poses):
        vals = [float(ts), *pose.translation, *pose.quat]
        lines.append(" ".join(f"{v:.17g}" for v in vals))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_trajectory(path) -> tuple[list[float], list[Pose]]:
    stamps, poses = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise FormatError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
        vals = [float(p) for p in parts]
        stamps.append(vals[0])
        poses.append(Pose(vals[4:8], vals[1:4]))
    return stamps, poses
