"""Analytic scenes, ray casting and a synthetic stand-in for a learned flow frontend.

Surfaces are numbered so noise models can refer to them: the six faces of
the room box are ``0..5`` (``-x, +x, -y, +y, -z, +z``) and object ``k`` is
surface ``6 + k``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ba import FactorGraph, SynthTruth, predict_flow
from .errors import InsufficientKeyframes
from .geometry import Intrinsics, Pose, look_at

NO_HIT = -1
ROOM_FACES = 6


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple

    def __post_init__(self):
        lo, hi = np.asarray(self.lo, float), np.asarray(self.hi, float)
        if lo.shape != (3,) or hi.shape != (3,) or np.any(hi <= lo):
            raise ValueError("box needs positive extent on every axis")

    @classmethod
    def centered(cls, center, size) -> Box:
        c, s = np.asarray(center, float), np.asarray(size, float)
        return cls(tuple(c - s / 2), tuple(c + s / 2))

    def contains(self, points) -> np.ndarray:
        p = np.atleast_2d(points)
        return np.all((p > np.asarray(self.lo)) & (p < np.asarray(self.hi)), axis=1)


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("sphere radius must be positive")


@dataclass(frozen=True)
class Scene:
    room: Box
    objects: tuple = ()

    @property
    def n_surfaces(self) -> int:
        return ROOM_FACES + len(self.objects)


def default_scene() -> Scene:
    """6 x 5 x 3 m room with a sphere and a box standing on the floor."""
    room = Box((-3.0, -2.5, 0.0), (3.0, 2.5, 3.0))
    sphere = Sphere((0.6, 0.45, 0.9), 0.5)
    box = Box((-1.0, -0.9, 0.0), (-0.2, -0.2, 1.0))
    return Scene(room, (sphere, box))


def default_trajectory(
    n: int = 24,
    axes: tuple = (2.2, 1.8),
    height: float = 1.5,
    target: tuple = (0.0, 0.0, 0.9),
) -> list[Pose]:
    """Cameras on a horizontal ellipse, all looking at ``target``."""
    poses = []
    for k in range(n):
        a = 2.0 * np.pi * k / n
        eye = (axes[0] * np.cos(a), axes[1] * np.sin(a), height)
        poses.append(look_at(eye, target))
    return poses


def _slab(lo, hi, o, d):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (lo - o) * inv
        t1 = (hi - o) * inv
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    # rays parallel to a slab: inside -> unbounded, outside -> miss
    par = d == 0
    inside = (o >= lo) & (o <= hi)
    tmin = np.where(par, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(par, np.where(inside, np.inf, -np.inf), tmax)
    near_axis = np.argmax(tmin, axis=1)
    far_axis = np.argmin(tmax, axis=1)
    return tmin.max(axis=1), tmax.min(axis=1), near_axis, far_axis


def _face_id(axis, d_component_sign_positive, exiting):
    # exiting through the +side when moving in +direction
    plus = d_component_sign_positive == exiting
    return 2 * axis + plus.astype(np.int64)


def raycast(scene: Scene, origins: np.ndarray, dirs: np.ndarray, t_min: float = 1e-9):
    """Nearest hit along each ray ``o + t d`` with ``t > t_min``.

    Returns:
        t: ``(N,)`` ray parameter of the hit, ``inf`` on a miss.
        surface: ``(N,)`` surface id or :data:`NO_HIT`.
    """
    o = np.broadcast_to(np.asarray(origins, float), np.shape(dirs)).reshape(-1, 3)
    d = np.asarray(dirs, float).reshape(-1, 3)
    n = len(d)
    best_t = np.full(n, np.inf)
    best_s = np.full(n, NO_HIT, dtype=np.int64)

    def consider(t, sid):
        better = (t > t_min) & (t < best_t)
        best_t[better] = t[better]
        best_s[better] = sid[better] if np.ndim(sid) else sid

    lo, hi = np.asarray(scene.room.lo), np.asarray(scene.room.hi)
    tn, tf, na, fa = _slab(lo, hi, o, d)
    hit = tn <= tf
    rows = np.arange(n)
    t_in = np.where(hit, tn, np.inf)
    t_out = np.where(hit, tf, np.inf)
    consider(t_in, _face_id(na, d[rows, na] > 0, False))
    consider(t_out, _face_id(fa, d[rows, fa] > 0, True))

    for k, obj in enumerate(scene.objects):
        sid = ROOM_FACES + k
        if isinstance(obj, Sphere):
            c = np.asarray(obj.center, float)
            oc = o - c
            a = np.einsum("ij,ij->i", d, d)
            b = np.einsum("ij,ij->i", oc, d)
            cc = np.einsum("ij,ij->i", oc, oc) - obj.radius**2
            disc = b * b - a * cc
            ok = disc >= 0
            sq = np.sqrt(np.where(ok, disc, 0.0))
            t1 = np.where(ok, (-b - sq) / a, np.inf)
            t2 = np.where(ok, (-b + sq) / a, np.inf)
            t = np.where(t1 > t_min, t1, t2)
            consider(np.where(ok, t, np.inf), np.full(n, sid))
        elif isinstance(obj, Box):
            tn, tf, _, _ = _slab(np.asarray(obj.lo), np.asarray(obj.hi), o, d)
            ok = tn <= tf
            t = np.where(tn > t_min, tn, tf)
            consider(np.where(ok, t, np.inf), np.full(n, sid))
        else:
            raise TypeError(f"unsupported primitive {type(obj).__name__}")
    return best_t, best_s


def raycast_inverse_depth(scene: Scene, pose: Pose, K: Intrinsics, return_surface: bool = False):
    """Ground-truth inverse depth per pixel; NaN where no surface is hit."""
    rays_cam = K.rays()
    dirs = rays_cam @ pose.rotation.T
    t, surf = raycast(scene, pose.translation, dirs)
    # camera rays have unit z, so the ray parameter is the depth
    inv = np.where(np.isfinite(t), 1.0 / np.where(np.isfinite(t), t, 1.0), np.nan)
    inv = inv.reshape(K.height, K.width)
    if return_surface:
        return inv, surf.reshape(K.height, K.width)
    return inv


@dataclass(frozen=True)
class NoiseModel:
    """Flow noise that emulates the confidence structure of a learned frontend.

    Attributes:
        sigma_flow: base flow noise std in low-res pixels.
        masks: textureless image rectangles ``(x, y, w, h)`` in low-res pixels.
        mask_inflation: noise std multiplier inside textureless regions.
        textureless_surfaces: surface ids treated as textureless wherever seen.
        outlier_fraction: fraction of pixels per frame whose flows are corrupted.
        outlier_flow: magnitude in pixels of the corruption.
        pose_noise_rot, pose_noise_trans: initial pose perturbation (rad, m).
        depth_noise: std of the multiplicative lognormal inverse-depth init noise.
        seed: RNG seed.
    """

    sigma_flow: float = 0.5
    masks: tuple = ()
    mask_inflation: float = 100.0
    textureless_surfaces: tuple = ()
    outlier_fraction: float = 0.0
    outlier_flow: float = 5.0
    pose_noise_rot: float = 0.0
    pose_noise_trans: float = 0.0
    depth_noise: float = 0.0
    seed: int = 0
    noiseless: bool = field(default=False)

    def __post_init__(self):
        if not self.sigma_flow > 0:
            raise ValueError("sigma_flow must be positive")
        if not 0 <= self.outlier_fraction < 1:
            raise ValueError("outlier_fraction must be in [0, 1)")
        if (self.masks or self.textureless_surfaces) and self.mask_inflation < 10:
            raise ValueError("textureless inflation must be at least 10")

    def textureless_map(self, K: Intrinsics, surface: np.ndarray) -> np.ndarray:
        m = np.isin(surface, np.asarray(self.textureless_surfaces, dtype=np.int64))
        for x, y, w, h in self.masks:
            if x < 0 or y < 0 or x + w > K.width or y + h > K.height or w <= 0 or h <= 0:
                raise ValueError(f"mask {(x, y, w, h)} outside the {K.width}x{K.height} image")
            m[y : y + h, x : x + w] = True
        return m


def default_noise(seed: int = 0) -> NoiseModel:
    """Noise of the default pipeline run.

    Outliers sit at five base sigmas: a consistent false match per pixel that
    still keeps its nominal weight.
    """
    return NoiseModel(
        sigma_flow=0.1,
        masks=((0, 0, 18, 12),),
        mask_inflation=100.0,
        textureless_surfaces=(1,),
        outlier_fraction=0.2,
        outlier_flow=0.5,
        pose_noise_rot=0.05,
        pose_noise_trans=0.05,
        depth_noise=0.2,
        seed=seed,
    )


def _visible_in(scene: Scene, pose: Pose, K: Intrinsics, points: np.ndarray):
    """Projection of world points into a camera plus an unoccluded-and-in-view mask."""
    pc = (points - pose.translation) @ pose.rotation
    z = pc[:, 2]
    front = z > 1e-6
    zs = np.where(front, z, 1.0)
    uv = np.stack([K.fx * pc[:, 0] / zs + K.cx, K.fy * pc[:, 1] / zs + K.cy], axis=1)
    inside = front & (uv[:, 0] > -0.5) & (uv[:, 0] < K.width - 0.5) & (uv[:, 1] > -0.5) & (uv[:, 1] < K.height - 0.5)
    vis = np.zeros(len(points), dtype=bool)
    if np.any(inside):
        dirs = points[inside] - pose.translation
        t, _ = raycast(scene, pose.translation, dirs)
        vis[inside] = t >= 1.0 - 1e-6
    return uv, vis


def synthesize_factor_graph(
    scene: Scene,
    trajectory: list[Pose],
    K: Intrinsics,
    noise: NoiseModel,
    covisibility_window: int = 3,
    gauge=(0,),
) -> FactorGraph:
    """Build a flow-factor graph whose measurements come from ground truth plus noise.

    Every ordered keyframe pair within the covisibility window gets one factor
    per valid pixel of the source frame that lands, unoccluded, inside the
    target frame. Weights are ``1 / sigma(p)^2`` per axis. Outlier pixels get a
    large random flow offset at nominal weight. Non-gauge poses and all
    inverse depths are then perturbed to form the initial state.
    """
    n = len(trajectory)
    if n < 2:
        raise InsufficientKeyframes("need at least two keyframes")
    rng = np.random.Generator(np.random.Philox(noise.seed))
    pixels = K.pixel_grid()

    inv_gt = np.empty((n, K.height, K.width))
    textureless = np.zeros((n, K.height, K.width), dtype=bool)
    for k, pose in enumerate(trajectory):
        inv_gt[k], surf = raycast_inverse_depth(scene, pose, K, return_surface=True)
        textureless[k] = noise.textureless_map(K, surf)
    valid = np.isfinite(inv_gt)
    sigma = np.where(textureless, noise.sigma_flow * noise.mask_inflation, noise.sigma_flow)
    outlier = (rng.random((n, K.height, K.width)) < noise.outlier_fraction) & valid

    ii, jj, pix = [], [], []
    for i in range(n):
        src = np.flatnonzero(valid[i].ravel())
        d_src = inv_gt[i].ravel()[src]
        world = trajectory[i].act(K.rays(pixels[src]) / d_src[:, None])
        for j in range(max(0, i - covisibility_window), min(n, i + covisibility_window + 1)):
            if j == i:
                continue
            _, vis = _visible_in(scene, trajectory[j], K, world)
            p = src[vis]
            ii.append(np.full(p.size, i, dtype=np.int64))
            jj.append(np.full(p.size, j, dtype=np.int64))
            pix.append(p)
    ii = np.concatenate(ii) if ii else np.zeros(0, dtype=np.int64)
    jj = np.concatenate(jj) if jj else np.zeros(0, dtype=np.int64)
    pix = np.concatenate(pix) if pix else np.zeros(0, dtype=np.int64)
    m = ii.size

    s = sigma.reshape(n, -1)[ii, pix]
    weight = np.repeat((1.0 / s**2)[:, None], 2, axis=1)
    exact = FactorGraph(K, list(trajectory), inv_gt, valid, ii, jj, pix, np.zeros((m, 2)), weight)
    uv = predict_flow(exact)[0] if m else np.zeros((0, 2))

    noise_px = rng.standard_normal((m, 2)) * s[:, None]
    # one offset per outlier pixel, shared by all of its factors (a consistent false match)
    ang = rng.uniform(0.0, 2.0 * np.pi, (n, K.height * K.width))[ii, pix]
    offset = noise.outlier_flow * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    is_out = outlier.reshape(n, -1)[ii, pix]
    target = uv if noise.noiseless else uv + noise_px + np.where(is_out[:, None], offset, 0.0)

    gauge = frozenset(int(g) for g in gauge)
    poses0 = []
    for k, pose in enumerate(trajectory):
        xi = np.concatenate(
            [rng.standard_normal(3) * noise.pose_noise_rot, rng.standard_normal(3) * noise.pose_noise_trans]
        )
        poses0.append(pose if k in gauge else pose.retract(xi))
    d0 = np.where(valid, inv_gt, 1.0) * np.exp(rng.standard_normal(inv_gt.shape) * noise.depth_noise)

    truth = SynthTruth(
        poses=list(trajectory),
        inv_depth=inv_gt,
        pixel_sigma=sigma,
        textureless=textureless,
        outlier=outlier,
    )
    return FactorGraph(
        K=K,
        poses=poses0,
        inv_depth=d0,
        valid=valid,
        ii=ii,
        jj=jj,
        pix=pix,
        target=target,
        weight=weight,
        gauge=gauge,
        truth=truth,
    )


def _sample_rect(rng, origin, e1, e2, density):
    area = np.linalg.norm(np.cross(e1, e2))
    m = int(np.floor(area * density + 0.5))
    a, b = rng.random((2, m))
    return origin + a[:, None] * e1 + b[:, None] * e2


def _box_faces(box: Box):
    lo, hi = np.asarray(box.lo, float), np.asarray(box.hi, float)
    ext = hi - lo
    for axis in range(3):
        u, v = [a for a in range(3) if a != axis]
        e1 = np.zeros(3)
        e1[u] = ext[u]
        e2 = np.zeros(3)
        e2[v] = ext[v]
        for side in (lo, hi):
            origin = lo.copy()
            origin[axis] = side[axis]
            yield origin, e1, e2


def sample_scene_surface(scene: Scene, density: float, seed: int = 0) -> np.ndarray:
    """Uniform samples over every primitive surface at ``density`` points per m^2."""
    rng = np.random.Generator(np.random.Philox(seed))
    parts = [_sample_rect(rng, o, e1, e2, density) for o, e1, e2 in _box_faces(scene.room)]
    for obj in scene.objects:
        if isinstance(obj, Sphere):
            m = int(np.floor(4 * np.pi * obj.radius**2 * density + 0.5))
            g = rng.standard_normal((m, 3))
            g /= np.linalg.norm(g, axis=1, keepdims=True)
            parts.append(np.asarray(obj.center) + obj.radius * g)
        else:
            parts.extend(_sample_rect(rng, o, e1, e2, density) for o, e1, e2 in _box_faces(obj))
    return np.concatenate(parts)


def ground_truth_cloud(
    scene: Scene, trajectory: list[Pose], K: Intrinsics, density: float = 1e4, seed: int = 0
) -> np.ndarray:
    """Surface samples seen, unoccluded, by at least one keyframe."""
    pts = sample_scene_surface(scene, density, seed)
    seen = np.zeros(len(pts), dtype=bool)
    for pose in trajectory:
        todo = ~seen
        if not np.any(todo):
            break
        _, vis = _visible_in(scene, pose, K, pts[todo])
        seen[np.flatnonzero(todo)[vis]] = True
    return pts[seen]
