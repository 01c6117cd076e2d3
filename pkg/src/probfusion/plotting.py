"""Report figures written next to the CSV / key=value outputs."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps PNG bytes stable across runs
_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_umax_sweep(rows: list[dict], path) -> Path:
    """Triangle count and accuracy/completeness against the uncertainty bound.

    ``rows`` carry ``u_max``, ``triangles``, ``accuracy_rmse`` and
    ``completeness_rmse``; an infinite bound is drawn left of the finite ones.
    """
    finite = [r["u_max"] for r in rows if not math.isinf(r["u_max"])]
    inf_x = 10 * max(finite) if finite else 1.0
    xs = [inf_x if math.isinf(r["u_max"]) else r["u_max"] for r in rows]
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax0.plot(xs, [r["triangles"] for r in rows], "o-")
    ax0.set_ylabel("triangles")
    for key, label in (("accuracy_rmse", "accuracy"), ("completeness_rmse", "completeness")):
        ys = [r.get(key, np.nan) for r in rows]
        ax1.plot(xs, ys, "o-", label=label)
    ax1.set_ylabel("RMSE [m]")
    ax1.legend()
    for ax in (ax0, ax1):
        ax.set_xscale("log")
        ax.invert_xaxis()
        ax.set_xlabel("u_max (rightmost: strictest)")
        ticks = sorted(set(xs))
        ax.set_xticks(ticks)
        ax.set_xticklabels(["inf" if x == inf_x and x not in finite else f"{x:g}" for x in ticks])
        ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def plot_keyframe(z: np.ndarray, sigma: np.ndarray, flow_weight: np.ndarray | None, path, title: str = "") -> Path:
    """Depth, depth std (log scale) and, if given, mean flow weight per low-res pixel."""
    n = 3 if flow_weight is not None else 2
    fig, axes = plt.subplots(1, n, figsize=(4 * n, 3))
    im = axes[0].imshow(z, cmap="viridis")
    axes[0].set_title("depth [m]")
    fig.colorbar(im, ax=axes[0], shrink=0.8)
    with np.errstate(divide="ignore", invalid="ignore"):
        im = axes[1].imshow(np.log10(sigma), cmap="magma")
    axes[1].set_title("log10 sigma_z [m]")
    fig.colorbar(im, ax=axes[1], shrink=0.8)
    if flow_weight is not None:
        with np.errstate(divide="ignore"):
            im = axes[2].imshow(np.log10(flow_weight), cmap="cividis")
        axes[2].set_title("log10 flow weight")
        fig.colorbar(im, ax=axes[2], shrink=0.8)
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_convergence(costs, path) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.semilogy(np.arange(len(costs)), costs, "o-")
    ax.set_xlabel("iteration")
    ax.set_ylabel("cost")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)
