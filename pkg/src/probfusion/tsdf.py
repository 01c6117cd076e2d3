"""Truncated signed distance volume fused with per-measurement uncertainty weights."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import AllZeroWeights, DimensionMismatch, InvalidPose
from .geometry import Intrinsics, Pose
from .upsample import DepthImage

MAX_WEIGHT = 1e4


class FusionWeightMode(enum.Enum):
    INV_SIGMA = "inv-sigma"
    INV_VAR = "inv-var"
    CONSTANT = "constant"

    @classmethod
    def parse(cls, value) -> FusionWeightMode:
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            names = ", ".join(m.value for m in cls)
            raise ValueError(f"unknown weight mode {value!r} (expected one of {names})") from None


def measurement_weight(sigma_z, mode: FusionWeightMode) -> np.ndarray:
    """Fusion weight of each depth measurement, clamped to ``[0, 1e4]``."""
    mode = FusionWeightMode.parse(mode)
    sigma_z = np.asarray(sigma_z, dtype=float)
    if mode is FusionWeightMode.CONSTANT:
        w = np.ones_like(sigma_z)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            w = 1.0 / sigma_z if mode is FusionWeightMode.INV_SIGMA else 1.0 / (sigma_z * sigma_z)
    w = np.where(np.isnan(w), 0.0, w)
    return np.clip(w, 0.0, MAX_WEIGHT)


def fused_value_oracle(measurements, mode=FusionWeightMode.INV_SIGMA, truncation: float | None = None) -> float:
    """Closed-form weighted mean of ``(s, sigma_z)`` pairs, same weights as integration.

    With ``truncation`` set, distances are clamped to ``[-tau, tau]`` first.
    """
    m = np.asarray(measurements, dtype=float).reshape(-1, 2)
    if len(m) == 0:
        raise ValueError("need at least one measurement")
    s = m[:, 0] if truncation is None else np.clip(m[:, 0], -truncation, truncation)
    w = measurement_weight(m[:, 1], mode)
    total = w.sum()
    if total <= 0:
        raise AllZeroWeights("every measurement has zero weight")
    return float(np.sum(w * s) / total)


@dataclass
class TsdfVolume:
    """Dense voxel grid of truncated signed distance ``phi`` and accumulated weight ``W``.

    Voxel ``(i, j, k)`` has its center at ``origin + voxel_size * (i, j, k)``.
    Untouched voxels hold ``phi = truncation`` and ``W = 0``.
    """

    origin: np.ndarray
    voxel_size: float
    phi: np.ndarray
    weight: np.ndarray
    truncation: float = 0.1

    @classmethod
    def create(cls, origin, voxel_size: float, dims, truncation: float = 0.1) -> TsdfVolume:
        if voxel_size <= 0 or truncation <= 0:
            raise ValueError("voxel size and truncation must be positive")
        dims = tuple(int(n) for n in dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError("dims must be three positive integers")
        return cls(
            origin=np.asarray(origin, dtype=float),
            voxel_size=float(voxel_size),
            phi=np.full(dims, float(truncation)),
            weight=np.zeros(dims),
            truncation=float(truncation),
        )

    @classmethod
    def enclosing(cls, lo, hi, voxel_size: float = 0.05, truncation: float = 0.1, margin: float = 0.2) -> TsdfVolume:
        """Volume covering the axis-aligned box ``[lo, hi]`` plus a margin."""
        lo = np.asarray(lo, dtype=float) - margin
        hi = np.asarray(hi, dtype=float) + margin
        dims = np.ceil((hi - lo) / voxel_size).astype(int) + 1
        return cls.create(lo, voxel_size, dims, truncation)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.phi.shape

    def voxel_centers(self) -> np.ndarray:
        idx = np.indices(self.dims).reshape(3, -1).T
        return self.origin + self.voxel_size * idx

    def update(self, flat_index: np.ndarray, sdf: np.ndarray, w: np.ndarray) -> None:
        """Running weighted average on the selected voxels (each index at most once)."""
        keep = w > 0
        idx, s, w = flat_index[keep], sdf[keep], w[keep]
        phi = self.phi.reshape(-1)
        W = self.weight.reshape(-1)
        W_old = W[idx]
        W_new = W_old + w
        phi[idx] = (W_old * phi[idx] + w * s) / W_new
        W[idx] = W_new

    def integrate(
        self,
        image: DepthImage,
        pose: Pose,
        K: Intrinsics,
        mode=FusionWeightMode.INV_SIGMA,
        chunk: int = 1 << 20,
    ) -> TsdfVolume:
        """Fuse one depth image seen from camera-to-world ``pose``.

        Each voxel center is projected into the image (nearest pixel). The
        projective distance ``s = z_meas - z_voxel`` is dropped when
        ``s < -tau`` and clamped to ``[-tau, tau]`` otherwise.
        """
        mode = FusionWeightMode.parse(mode)
        if image.z.shape != (K.height, K.width):
            raise DimensionMismatch(f"depth image {image.z.shape} vs intrinsics {(K.height, K.width)}")
        R, t = pose.rotation, pose.translation
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise InvalidPose("pose has non-finite entries")
        valid = image.valid
        z_img = np.where(valid, image.z, np.nan)
        w_img = np.where(valid, measurement_weight(np.where(valid, image.sigma, 1.0), mode), 0.0)
        tau = self.truncation
        n_vox = int(np.prod(self.dims))
        grid = np.indices(self.dims).reshape(3, -1)
        for start in range(0, n_vox, chunk):
            sl = slice(start, min(n_vox, start + chunk))
            pts = self.origin + self.voxel_size * grid[:, sl].T
            pc = (pts - t) @ R
            zc = pc[:, 2]
            front = zc > 1e-6
            zs = np.where(front, zc, 1.0)
            u = np.rint(K.fx * pc[:, 0] / zs + K.cx)
            v = np.rint(K.fy * pc[:, 1] / zs + K.cy)
            inside = front & (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
            sel = np.flatnonzero(inside)
            ui = u[sel].astype(np.int64)
            vi = v[sel].astype(np.int64)
            zm = z_img[vi, ui]
            s = zm - zc[sel]
            ok = np.isfinite(zm) & (s >= -tau)
            sel, s = sel[ok], s[ok]
            w = w_img[vi[ok], ui[ok]]
            self.update(sel + start, np.clip(s, -tau, tau), w)
        return self

    def world_to_index(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=float) - self.origin) / self.voxel_size
