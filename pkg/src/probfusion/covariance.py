"""Marginal covariances recovered from the Cholesky factor of the reduced camera matrix.

With ``S = L L'`` and ``F = L^-1 E P^-1`` the depth marginals are

    sigma^2_i = 1 / P_i + sum_k F_ki^2

so only triangular solves against ``E P^-1`` are needed; ``S`` is never
inverted and the off-diagonal depth covariances are never formed.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .ba import MIN_DEPTH_INFO, BlockSparseHessian, ReducedSystem


def pose_covariance(red: ReducedSystem) -> np.ndarray:
    """``S^-1`` as ``L^-T L^-1``, via a triangular solve against the identity."""
    n = red.L.shape[0]
    if n == 0:
        return np.zeros((0, 0))
    L_inv = scipy.linalg.solve_triangular(red.L, np.eye(n), lower=True)
    cov = L_inv.T @ L_inv
    return 0.5 * (cov + cov.T)


def _column_batches(H: BlockSparseHessian, batch_size: int | None):
    n = H.n_depths
    if batch_size is None:
        # one keyframe of depths per batch when the layout is known
        batch_size = int(np.prod(H.depth_shape[1:])) if len(H.depth_shape) > 1 else n
    batch_size = max(1, batch_size)
    for start in range(0, n, batch_size):
        yield slice(start, min(n, start + batch_size))


def depth_variances_flat(H: BlockSparseHessian, L: np.ndarray, batch_size: int | None = None) -> np.ndarray:
    """Marginal variance of every inverse-depth variable, no validity masking."""
    P_inv = 1.0 / H.P
    out = P_inv.copy()
    if L.shape[0] == 0:
        return out
    E = sp.csc_matrix(H.E)
    for cols in _column_batches(H, batch_size):
        block = (E[:, cols] @ sp.diags(P_inv[cols])).toarray()
        F = scipy.linalg.solve_triangular(L, block, lower=True, check_finite=False)
        out[cols] += np.einsum("ki,ki->i", F, F)
    return out


def depth_marginal_variances(
    H: BlockSparseHessian, L: np.ndarray, batch_size: int | None = None
) -> np.ndarray:
    """Per-keyframe inverse-depth variance maps.

    Args:
        H: the damped system the factor ``L`` was computed from.
        L: lower Cholesky factor of the reduced camera matrix.
        batch_size: depth columns per triangular solve. Defaults to one
            keyframe, which bounds peak memory at ``6 m x h w`` floats.

    Returns:
        Array of shape ``H.depth_shape``; depths whose undamped information
        is below 1e-10 are NaN (their value would only reflect the prior).
    """
    var = depth_variances_flat(H, L, batch_size)
    var = np.where(H.depth_weight >= MIN_DEPTH_INFO, var, np.nan)
    return var.reshape(H.depth_shape)
