"""Marching cubes over the TSDF, restricted to voxels below an uncertainty bound."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._mc_tables import TRI_TABLE
from .errors import FormatError
from .tsdf import TsdfVolume

# cube corners (x, y, z) in the table's numbering
CORNERS = np.array(
    [(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0), (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)],
    dtype=np.int64,
)
# edge -> (lower corner offset, axis)
EDGES = [
    ((0, 0, 0), 0), ((1, 0, 0), 1), ((0, 1, 0), 0), ((0, 0, 0), 1),
    ((0, 0, 1), 0), ((1, 0, 1), 1), ((0, 1, 1), 0), ((0, 0, 1), 1),
    ((0, 0, 0), 2), ((1, 0, 0), 2), ((1, 1, 0), 2), ((0, 1, 0), 2),
]  # fmt: skip
EDGE_BASE = np.array([e[0] for e in EDGES], dtype=np.int64)
EDGE_AXIS = np.array([e[1] for e in EDGES], dtype=np.int64)


@dataclass
class TriangleMesh:
    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    uncertainty: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        self.uncertainty = np.asarray(self.uncertainty, dtype=float).reshape(-1)
        if self.uncertainty.size != len(self.vertices):
            raise ValueError("one uncertainty value per vertex required")
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, k]] for k in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def euler_characteristic(self) -> int:
        t = self.triangles
        edges = np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
        n_edges = len(np.unique(edges, axis=0))
        n_verts = len(np.unique(t))
        return n_verts - n_edges + len(t)


def voxel_uncertainty(weight: np.ndarray) -> np.ndarray:
    """Per-voxel uncertainty ``1 / W^2``; infinite where nothing was fused."""
    W = np.asarray(weight, dtype=float)
    with np.errstate(divide="ignore"):
        return np.where(W > 0, 1.0 / (W * W), np.inf)


def admitted_voxels(vol: TsdfVolume, u_max: float = np.inf) -> np.ndarray:
    """Voxels that were observed and whose uncertainty does not exceed ``u_max``."""
    if not u_max > 0:
        raise ValueError("u_max must be positive (or inf)")
    return (vol.weight > 0) & (voxel_uncertainty(vol.weight) <= u_max)


def extract_mesh(vol: TsdfVolume, u_max: float = np.inf) -> TriangleMesh:
    """Zero level set of ``phi`` over cubes whose eight corners are all admitted.

    Vertices are placed by linear interpolation along cube edges and shared
    between neighboring cubes; their uncertainty is interpolated the same way.
    Crossings within 1e-7 of a grid point snap onto it, and triangles that
    collapse as a result are dropped.
    """
    ok = admitted_voxels(vol, u_max)
    phi = vol.phi
    nx, ny, nz = phi.shape
    if min(nx, ny, nz) < 2:
        return TriangleMesh()

    cube_ok = np.ones((nx - 1, ny - 1, nz - 1), dtype=bool)
    case = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.int64)
    for k, (dx, dy, dz) in enumerate(CORNERS):
        sl = (slice(dx, nx - 1 + dx), slice(dy, ny - 1 + dy), slice(dz, nz - 1 + dz))
        cube_ok &= ok[sl]
        case |= (phi[sl] < 0).astype(np.int64) << k
    active = cube_ok & (case != 0) & (case != 255)
    cubes = np.argwhere(active)
    if len(cubes) == 0:
        return TriangleMesh()

    rows = TRI_TABLE[case[active]].astype(np.int64)
    n_cube_tris = (rows >= 0).sum(axis=1) // 3
    cube_of_tri = np.repeat(np.arange(len(cubes)), n_cube_tris)
    edge_local = rows[rows >= 0]  # row-major keeps each cube's triangles together
    cube_of_corner = np.repeat(cube_of_tri, 3)

    base = cubes[cube_of_corner] + EDGE_BASE[edge_local]
    axis = EDGE_AXIS[edge_local]
    edge_id = ((base[:, 0] * ny + base[:, 1]) * nz + base[:, 2]) * 3 + axis
    uniq, inverse = np.unique(edge_id, return_inverse=True)

    lin = uniq // 3
    ax = uniq % 3
    p0 = np.stack(np.unravel_index(lin, (nx, ny, nz)), axis=1)
    p1 = p0 + np.eye(3, dtype=np.int64)[ax]
    f0 = phi[p0[:, 0], p0[:, 1], p0[:, 2]]
    f1 = phi[p1[:, 0], p1[:, 1], p1[:, 2]]
    t = f0 / (f0 - f1)
    verts = vol.origin + vol.voxel_size * (p0 + t[:, None] * (p1 - p0))
    u = voxel_uncertainty(vol.weight)
    u0 = u[p0[:, 0], p0[:, 1], p0[:, 2]]
    u1 = u[p1[:, 0], p1[:, 1], p1[:, 2]]
    unc = (1.0 - t) * u0 + t * u1

    # a crossing exactly on a grid point is shared by every edge touching it
    n_grid = nx * ny * nz
    lin1 = (p1[:, 0] * ny + p1[:, 1]) * nz + p1[:, 2]
    snap = 1e-7
    key = np.where(t <= snap, 3 * n_grid + lin, np.where(t >= 1 - snap, 3 * n_grid + lin1, uniq))
    key, first, remap = np.unique(key, return_index=True, return_inverse=True)
    verts, unc = verts[first], unc[first]
    tris = remap.reshape(-1)[inverse].reshape(-1, 3)
    # table winding is for "inside = below iso"; flip so normals point to positive phi
    tris = tris[:, [0, 2, 1]]
    keep = (tris[:, 0] != tris[:, 1]) & (tris[:, 1] != tris[:, 2]) & (tris[:, 0] != tris[:, 2])
    return compact(TriangleMesh(verts, tris[keep], unc))


def compact(mesh: TriangleMesh) -> TriangleMesh:
    """Drop vertices no triangle references."""
    used, inverse = np.unique(mesh.triangles, return_inverse=True)
    return TriangleMesh(mesh.vertices[used], inverse.reshape(-1, 3), mesh.uncertainty[used])


def signed_volume(mesh: TriangleMesh) -> float:
    a, b, c = (mesh.vertices[mesh.triangles[:, k]] for k in range(3))
    return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)


def export_ply(mesh: TriangleMesh, path, binary: bool = False) -> Path:
    """Write ``x y z uncertainty`` vertices and triangle faces as PLY."""
    path = Path(path)
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        "ply\n"
        f"format {fmt} 1.0\n"
        f"element vertex {mesh.n_vertices}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property float uncertainty\n"
        f"element face {mesh.n_triangles}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    )
    vdata = np.concatenate([mesh.vertices, mesh.uncertainty[:, None]], axis=1).astype(np.float32)
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            fh.write(vdata.astype("<f4").tobytes())
            face = np.zeros(mesh.n_triangles, dtype=[("n", "u1"), ("idx", "<i4", (3,))])
            face["n"] = 3
            face["idx"] = mesh.triangles
            fh.write(face.tobytes())
        else:
            lines = [" ".join(repr(float(x)) for x in row) for row in vdata]
            lines += ["3 " + " ".join(str(int(i)) for i in tri) for tri in mesh.triangles]
            if lines:
                fh.write(("\n".join(lines) + "\n").encode("ascii"))
    return path


def read_ply(path):
    """Read vertices (all float properties), and faces if present.

    Returns:
        (properties, faces): ``properties`` maps property name to an array,
        ``faces`` is an ``(M, 3)`` int array (empty when the file has none).
    """
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply\n") or end < 0:
        raise FormatError(f"{path}: not a PLY file")
    header = raw[:end].decode("ascii").splitlines()
    body = raw[end + len(b"end_header\n") :]
    fmt = None
    elements = []
    for line in header[1:]:
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append({"name": parts[1], "count": int(parts[2]), "props": []})
        elif parts[0] == "property":
            elements[-1]["props"].append(parts[1:])
    if fmt not in ("ascii", "binary_little_endian"):
        raise FormatError(f"{path}: unsupported PLY format {fmt!r}")

    props: dict[str, np.ndarray] = {}
    faces = np.zeros((0, 3), dtype=np.int64)
    if fmt == "ascii":
        tokens = body.decode("ascii").split()
        pos = 0
        for el in elements:
            if el["name"] == "vertex":
                k = len(el["props"])
                vals = np.array(tokens[pos : pos + k * el["count"]], dtype=float).reshape(el["count"], k)
                pos += k * el["count"]
                props = {p[-1]: vals[:, i] for i, p in enumerate(el["props"])}
            elif el["name"] == "face":
                rows = []
                for _ in range(el["count"]):
                    n = int(tokens[pos])
                    rows.append([int(x) for x in tokens[pos + 1 : pos + 1 + n]])
                    pos += 1 + n
                if rows and any(len(r) != 3 for r in rows):
                    raise FormatError(f"{path}: only triangle faces are supported")
                faces = np.array(rows, dtype=np.int64).reshape(-1, 3)
    else:
        offset = 0
        for el in elements:
            if el["name"] == "vertex":
                dt = np.dtype([(p[-1], "<f4" if p[0] == "float" else "<f8") for p in el["props"]])
                arr = np.frombuffer(body, dtype=dt, count=el["count"], offset=offset)
                offset += dt.itemsize * el["count"]
                props = {name: arr[name].astype(float) for name in dt.names}
            elif el["name"] == "face":
                dt = np.dtype([("n", "u1"), ("idx", "<i4", (3,))])
                arr = np.frombuffer(body, dtype=dt, count=el["count"], offset=offset)
                offset += dt.itemsize * el["count"]
                faces = arr["idx"].astype(np.int64)
    return props, faces


def load_mesh(path) -> TriangleMesh:
    props, faces = read_ply(path)
    if not props:
        return TriangleMesh()
    verts = np.stack([props["x"], props["y"], props["z"]], axis=1)
    unc = props.get("uncertainty", np.zeros(len(verts)))
    return TriangleMesh(verts, faces, unc)


def write_point_ply(points: np.ndarray, path, scalars: dict | None = None) -> Path:
    """ASCII point cloud with optional per-point float properties (e.g. error)."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    scalars = scalars or {}
    header = ["ply", "format ascii 1.0", f"element vertex {len(points)}"]
    header += [f"property float {c}" for c in ("x", "y", "z", *scalars)]
    header.append("end_header")
    cols = [points] + [np.asarray(v, dtype=float).reshape(-1, 1) for v in scalars.values()]
    data = np.concatenate(cols, axis=1).astype(np.float32)
    body = "\n".join(" ".join(repr(float(x)) for x in row) for row in data)
    Path(path).write_text("\n".join(header) + "\n" + (body + "\n" if len(data) else ""))
    return Path(path)


def load_point_ply(path) -> np.ndarray:
    props, _ = read_ply(path)
    if not props:
        return np.zeros((0, 3))
    return np.stack([props["x"], props["y"], props["z"]], axis=1)
