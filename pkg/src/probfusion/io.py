"""Binary artifact formats shared by the CLI stages.

All numeric files are little-endian and byte-deterministic for equal inputs:

* ``DMAP`` / ``VMAP``: magic, ``u32 width``, ``u32 height``, then ``f32``
  row-major values, NaN marking invalid pixels.
* ``TSDF``: magic, ``f64 origin[3]``, ``f64 voxel_size``, ``u32 dims[3]``,
  ``f64 truncation``, then interleaved ``(phi f32, W f32)`` in C order.
* ``HESS``: magic, ``u32 n_pose_vars``, ``u32 n_depths``, ``u32 nnz``,
  ``f64 damping``, ``C`` dense, ``E`` as COO (``u32 rows``, ``u32 cols``,
  ``f64 values``), then ``P``, ``v``, ``w``; all floats ``f64``.
* Factor graphs and per-stage state go in ``.npz`` archives written with a
  fixed timestamp.
"""

from __future__ import annotations

import io
import struct
import zipfile
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .ba import BlockSparseHessian, FactorGraph, SynthTruth
from .errors import FormatError
from .geometry import Intrinsics, Pose
from .tsdf import TsdfVolume
from .upsample import DepthImage

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _check_magic(buf: bytes, magic: bytes, path) -> None:
    if buf[:4] != magic:
        raise FormatError(f"{path}: expected magic {magic.decode()!r}, found {buf[:4]!r}")


def write_map(path, values: np.ndarray, magic: bytes = b"DMAP") -> Path:
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError("maps must be 2-D")
    h, w = values.shape
    Path(path).write_bytes(magic + struct.pack("<II", w, h) + values.astype("<f4").tobytes())
    return Path(path)


def read_map(path, magic: bytes = b"DMAP") -> np.ndarray:
    buf = Path(path).read_bytes()
    _check_magic(buf, magic, path)
    w, h = struct.unpack_from("<II", buf, 4)
    if len(buf) != 12 + 4 * w * h:
        raise FormatError(f"{path}: size does not match {w}x{h} header")
    return np.frombuffer(buf, dtype="<f4", offset=12).reshape(h, w).astype(float)


def write_depth_image(prefix, image: DepthImage) -> tuple[Path, Path]:
    """``<prefix>.z.dmap`` and ``<prefix>.sigma.dmap``."""
    prefix = str(prefix)
    return (
        write_map(prefix + ".z.dmap", image.z, b"DMAP"),
        write_map(prefix + ".sigma.dmap", image.sigma, b"DMAP"),
    )


def read_depth_image(prefix, keyframe: int = 0) -> DepthImage:
    prefix = str(prefix)
    return DepthImage(read_map(prefix + ".z.dmap"), read_map(prefix + ".sigma.dmap"), keyframe)


_TSDF_HEADER = struct.Struct("<4s3ddIIId")


def write_tsdf(path, vol: TsdfVolume) -> Path:
    head = _TSDF_HEADER.pack(b"TSDF", *map(float, vol.origin), vol.voxel_size, *vol.dims, vol.truncation)
    body = np.stack([vol.phi, vol.weight], axis=-1).astype("<f4")
    Path(path).write_bytes(head + body.tobytes())
    return Path(path)


def read_tsdf(path) -> TsdfVolume:
    buf = Path(path).read_bytes()
    _check_magic(buf, b"TSDF", path)
    _, ox, oy, oz, vs, nx, ny, nz, tau = _TSDF_HEADER.unpack_from(buf)
    n = nx * ny * nz
    if len(buf) != _TSDF_HEADER.size + 8 * n:
        raise FormatError(f"{path}: size does not match {nx}x{ny}x{nz} header")
    body = np.frombuffer(buf, dtype="<f4", offset=_TSDF_HEADER.size).reshape(nx, ny, nz, 2)
    return TsdfVolume(np.array([ox, oy, oz]), vs, body[..., 0].astype(float), body[..., 1].astype(float), tau)


def write_hessian(path, H: BlockSparseHessian) -> Path:
    coo = H.E.tocoo()
    parts = [
        b"HESS",
        struct.pack("<IIId", H.n_pose_vars, H.n_depths, coo.nnz, H.damping),
        H.C.astype("<f8").tobytes(),
        coo.row.astype("<u4").tobytes(),
        coo.col.astype("<u4").tobytes(),
        coo.data.astype("<f8").tobytes(),
        H.P.astype("<f8").tobytes(),
        H.v.astype("<f8").tobytes(),
        H.w.astype("<f8").tobytes(),
    ]
    Path(path).write_bytes(b"".join(parts))
    return Path(path)


def read_hessian(path) -> BlockSparseHessian:
    buf = Path(path).read_bytes()
    _check_magic(buf, b"HESS", path)
    m, n, nnz, lam = struct.unpack_from("<IIId", buf, 4)
    off = 24

    def take(dtype, count):
        nonlocal off
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        return arr

    try:
        C = take("<f8", m * m).reshape(m, m)
        rows, cols, vals = take("<u4", nnz), take("<u4", nnz), take("<f8", nnz)
        P, v, w = take("<f8", n), take("<f8", m), take("<f8", n)
    except ValueError as exc:
        raise FormatError(f"{path}: truncated HESS blob") from exc
    E = sp.coo_matrix((vals, (rows, cols)), shape=(m, n)).tocsr()
    return BlockSparseHessian(C.copy(), E, P.copy(), v.copy(), w.copy(), damping=lam)


def save_npz(path, **arrays) -> Path:
    """Like ``np.savez`` but byte-identical across runs."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=_ZIP_DATE)
            info.external_attr = 0o644 << 16
            zf.writestr(info, buf.getvalue())
    return Path(path)


def load_npz(path) -> dict[str, np.ndarray]:
    try:
        with np.load(path, allow_pickle=False) as f:
            return {k: f[k] for k in f.files}
    except (zipfile.BadZipFile, ValueError) as exc:
        raise FormatError(f"{path}: not a valid archive ({exc})") from exc


def poses_to_array(poses: list[Pose]) -> np.ndarray:
    return np.array([np.concatenate([p.translation, p.quat]) for p in poses]).reshape(-1, 7)


def poses_from_array(arr: np.ndarray) -> list[Pose]:
    return [Pose(row[3:], row[:3]) for row in np.asarray(arr, dtype=float).reshape(-1, 7)]


def _intrinsics_array(K: Intrinsics) -> np.ndarray:
    return np.array([K.fx, K.fy, K.cx, K.cy, K.width, K.height], dtype=float)


def intrinsics_from_array(a) -> Intrinsics:
    fx, fy, cx, cy, w, h = (float(x) for x in a)
    return Intrinsics(fx, fy, cx, cy, int(w), int(h))


def save_graph(path, graph: FactorGraph) -> Path:
    arrays = dict(
        K=_intrinsics_array(graph.K),
        poses=poses_to_array(graph.poses),
        inv_depth=graph.inv_depth,
        valid=graph.valid,
        ii=graph.ii,
        jj=graph.jj,
        pix=graph.pix,
        target=graph.target,
        weight=graph.weight,
        gauge=np.array(sorted(graph.gauge), dtype=np.int64),
    )
    if graph.truth is not None:
        tr = graph.truth
        arrays.update(
            truth_poses=poses_to_array(tr.poses),
            truth_inv_depth=tr.inv_depth,
            truth_pixel_sigma=tr.pixel_sigma,
            truth_textureless=tr.textureless,
            truth_outlier=tr.outlier,
        )
    return save_npz(path, **arrays)


def load_graph(path) -> FactorGraph:
    a = load_npz(path)
    missing = {"K", "poses", "inv_depth", "valid", "ii", "jj", "pix", "target", "weight", "gauge"} - set(a)
    if missing:
        raise FormatError(f"{path}: missing arrays {sorted(missing)}")
    truth = None
    if "truth_poses" in a:
        truth = SynthTruth(
            poses_from_array(a["truth_poses"]),
            a["truth_inv_depth"],
            a["truth_pixel_sigma"],
            a["truth_textureless"],
            a["truth_outlier"],
        )
    return FactorGraph(
        K=intrinsics_from_array(a["K"]),
        poses=poses_from_array(a["poses"]),
        inv_depth=a["inv_depth"],
        valid=a["valid"],
        ii=a["ii"],
        jj=a["jj"],
        pix=a["pix"],
        target=a["target"],
        weight=a["weight"],
        gauge=frozenset(int(g) for g in a["gauge"]),
        truth=truth,
    )
