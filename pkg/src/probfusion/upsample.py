"""Convex upsampling of inverse depth and its variance, and conversion to metric depth."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, NonPositiveInverseDepth

WEIGHT_EPS = 1e-6
# 3x3 neighborhood offsets, row-major (dy, dx)
OFFSETS = np.array([(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)])


@dataclass
class ConvexWeightField:
    """Nine convex weights per high-res pixel over its 3x3 low-res neighborhood.

    ``weights`` has shape ``(factor * h, factor * w, 9)``; neighbor ``k`` sits
    at offset ``OFFSETS[k]`` from the low-res pixel containing the high-res one.
    """

    weights: np.ndarray
    factor: int = 8

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.ndim != 3 or self.weights.shape[2] != 9:
            raise DimensionMismatch("weights must have shape (H, W, 9)")
        if np.any(self.weights < 0):
            raise ValueError("convex weights must be nonnegative")
        if not np.allclose(self.weights.sum(axis=2), 1.0, atol=1e-6):
            raise ValueError("convex weights must sum to one per pixel")

    @property
    def high_shape(self) -> tuple[int, int]:
        return self.weights.shape[:2]

    @property
    def low_shape(self) -> tuple[int, int]:
        return self.weights.shape[0] // self.factor, self.weights.shape[1] // self.factor

    @classmethod
    def onehot(cls, low_shape, factor: int = 8) -> ConvexWeightField:
        """Nearest-neighbor upsampling: all mass on the containing low-res pixel."""
        h, w = low_shape
        weights = np.zeros((h * factor, w * factor, 9))
        weights[..., 4] = 1.0
        return cls(weights, factor)

    @classmethod
    def bilinear(cls, low_shape, factor: int = 8) -> ConvexWeightField:
        """Bilinear interpolation between low-res pixel centers, written as convex weights."""
        h, w = low_shape
        H, W = h * factor, w * factor
        weights = np.zeros((H, W, 9))

        def axis_weights(n_high):
            u = np.arange(n_high)
            x = (u + 0.5) / factor - 0.5
            x0 = np.floor(x)
            a = x - x0
            off0 = (x0 - u // factor).astype(int)  # -1 or 0
            return off0, 1.0 - a, a

        oy, wy0, wy1 = axis_weights(H)
        ox, wx0, wx1 = axis_weights(W)
        for dy, wy in ((0, wy0), (1, wy1)):
            for dx, wx in ((0, wx0), (1, wx1)):
                ky = oy + dy + 1
                kx = ox + dx + 1
                k = ky[:, None] * 3 + kx[None, :]
                np.add.at(
                    weights,
                    (np.arange(H)[:, None].repeat(W, 1), np.arange(W)[None, :].repeat(H, 0), k),
                    wy[:, None] * wx[None, :],
                )
        return cls(weights, factor)


def _neighbor_index(low_shape, factor: int, high_shape) -> np.ndarray:
    """Flat low-res index of each of the 9 neighbors, clamped at the border."""
    h, w = low_shape
    H, W = high_shape
    cy = np.arange(H) // factor
    cx = np.arange(W) // factor
    out = np.empty((H, W, 9), dtype=np.int64)
    for k, (dy, dx) in enumerate(OFFSETS):
        ry = np.clip(cy + dy, 0, h - 1)
        rx = np.clip(cx + dx, 0, w - 1)
        out[..., k] = ry[:, None] * w + rx[None, :]
    return out


def _merged_weights(w: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Per neighbor, the total weight of all neighbors reading the same pixel."""
    m = np.zeros_like(w)
    for k in range(9):
        m[..., k] = np.sum(np.where(idx == idx[..., k : k + 1], w, 0.0), axis=2)
    return m


def convex_upsample(low_d: np.ndarray, low_var: np.ndarray, wf: ConvexWeightField):
    """Upsample inverse depth and its variance with the same convex weights.

    Mean is ``sum w_i d_i``; with independent low-res pixels the variance is
    ``sum w_i^2 var_i``. Borders clamp to the edge pixel, so a pixel can
    appear more than once in a window; its weights are summed before
    squaring. A high-res pixel is NaN when any neighbor with weight above
    1e-6 is NaN in either input.
    """
    low_d = np.asarray(low_d, dtype=float)
    low_var = np.asarray(low_var, dtype=float)
    if low_d.shape != low_var.shape:
        raise DimensionMismatch("depth and variance maps differ in shape")
    if low_d.shape != wf.low_shape or wf.high_shape != (low_d.shape[0] * wf.factor, low_d.shape[1] * wf.factor):
        raise DimensionMismatch(f"weight field {wf.high_shape} does not match map {low_d.shape} x{wf.factor}")
    idx = _neighbor_index(low_d.shape, wf.factor, wf.high_shape)
    nd = low_d.reshape(-1)[idx]
    nv = low_var.reshape(-1)[idx]
    w = wf.weights
    used = w > WEIGHT_EPS
    bad = np.any(used & ~(np.isfinite(nd) & np.isfinite(nv)), axis=2)
    nd = np.where(used, nd, 0.0)
    nv = np.where(used, nv, 0.0)
    d = np.sum(w * nd, axis=2)
    var = np.sum(w * _merged_weights(w, idx) * nv, axis=2)
    d[bad] = np.nan
    var[bad] = np.nan
    return d, var


def invdepth_to_depth(d, sigma_d):
    """First-order propagation ``z = 1/d``, ``sigma_z = sigma_d / d^2``.

    NaN entries pass through as NaN; finite nonpositive inverse depths raise.
    """
    d = np.asarray(d, dtype=float)
    sigma_d = np.asarray(sigma_d, dtype=float)
    if np.any(np.isfinite(d) & (d <= 0)):
        raise NonPositiveInverseDepth("inverse depth must be positive")
    with np.errstate(invalid="ignore"):
        z = 1.0 / d
        sigma_z = sigma_d / (d * d)
    if z.ndim == 0:
        return float(z), float(sigma_z)
    return z, sigma_z


@dataclass
class DepthImage:
    """Metric depth and its std at image resolution for one keyframe (NaN = invalid)."""

    z: np.ndarray
    sigma: np.ndarray
    keyframe: int = 0

    def __post_init__(self):
        if self.z.shape != self.sigma.shape:
            raise DimensionMismatch("depth and sigma images differ in shape")

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.z) & np.isfinite(self.sigma) & (self.z > 0) & (self.sigma > 0)


def upsample_keyframe(low_d, low_var, wf: ConvexWeightField, keyframe: int = 0) -> DepthImage:
    """Upsample one keyframe and convert it to a metric :class:`DepthImage`."""
    d, var = convex_upsample(low_d, low_var, wf)
    z, sigma = invdepth_to_depth(d, np.sqrt(var))
    return DepthImage(z, sigma, keyframe)
