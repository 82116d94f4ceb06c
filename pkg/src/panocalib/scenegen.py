"""Procedural box rooms with analytic ray casting.

Rooms are axis-aligned boxes with the floor at ``z = 0``; obstacles are
axis-aligned boxes or vertical cylinders. Every hit is computed in closed
form, so rendered depth is exact up to float rounding.

Scene spec JSON::

    {
      "room": {"width": 4.0, "depth": 4.0, "height": 3.0},
      "obstacles": [
        {"type": "box", "min": [x, y, z], "max": [x, y, z]},
        {"type": "cylinder", "center": [x, y], "radius": r, "z": [z0, z1]}
      ],
      "random_obstacles": {"count": 5, "size": [0.3, 0.8], "margin": 0.2},
      "materials": {"default": {"kind": "checker", "size": 0.5,
                                "colors": [[0.8, 0.75, 0.6], [0.3, 0.35, 0.45]],
                                "jitter": 0.25}}
    }

Material keys are ``default``, ``floor``, ``ceiling``, ``walls`` and
``obstacles``; ``kind`` is ``checker`` or ``solid``. The room spans
``[-width/2, width/2] x [-depth/2, depth/2] x [0, height]``.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import DepthMap, GeometryError, Panorama, Pose, sphere_grid


class SceneError(ValueError):
    pass


DEFAULT_MATERIAL = {
    "kind": "checker",
    "size": 0.5,
    "colors": [[0.82, 0.76, 0.62], [0.32, 0.36, 0.46]],
    "jitter": 0.3,
}

# surface ids used for texturing and shading
FLOOR, CEILING, WALL, OBSTACLE = 0, 1, 2, 3
_LIGHT = np.array([0.35, 0.55, 0.76])
_LIGHT = _LIGHT / np.linalg.norm(_LIGHT)


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def to_json(self) -> dict:
        return {"type": "box", "min": [float(x) for x in self.lo], "max": [float(x) for x in self.hi]}


@dataclass
class Cylinder:
    center: np.ndarray
    radius: float
    z0: float
    z1: float

    @property
    def lo(self) -> np.ndarray:
        return np.array([self.center[0] - self.radius, self.center[1] - self.radius, self.z0])

    @property
    def hi(self) -> np.ndarray:
        return np.array([self.center[0] + self.radius, self.center[1] + self.radius, self.z1])

    def to_json(self) -> dict:
        return {
            "type": "cylinder",
            "center": [float(x) for x in self.center],
            "radius": float(self.radius),
            "z": [float(self.z0), float(self.z1)],
        }


@dataclass
class Scene:
    lo: np.ndarray
    hi: np.ndarray
    obstacles: list = field(default_factory=list)
    materials: dict = field(default_factory=dict)
    # texture coordinates are read in the unstretched frame: p_tex = about + (p - about) / scale
    tex_scale: tuple = (1.0, 1.0)
    tex_about: tuple = (0.0, 0.0)

    def __post_init__(self) -> None:
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        if np.any(self.hi - self.lo <= 0):
            raise SceneError("room dimensions must be positive")
        for ob in self.obstacles:
            if np.any(ob.lo <= self.lo) or np.any(ob.hi > self.hi) or np.any(ob.hi <= ob.lo):
                raise SceneError(f"obstacle {ob.to_json()} not strictly inside the room")

    @property
    def size(self) -> np.ndarray:
        return self.hi - self.lo

    def material(self, surface: int) -> dict:
        key = {FLOOR: "floor", CEILING: "ceiling", WALL: "walls", OBSTACLE: "obstacles"}[surface]
        return self.materials.get(key, self.materials.get("default", DEFAULT_MATERIAL))

    def to_json(self) -> dict:
        return {
            "bounds": {"min": [float(x) for x in self.lo], "max": [float(x) for x in self.hi]},
            "obstacles": [o.to_json() for o in self.obstacles],
            "materials": self.materials,
            "tex_scale": [float(x) for x in self.tex_scale],
            "tex_about": [float(x) for x in self.tex_about],
        }

    def to_bytes(self) -> bytes:
        return json.dumps(self.to_json(), sort_keys=True).encode()

    def is_free(self, point, margin: float = 0.1) -> bool:
        p = np.asarray(point, dtype=np.float64)
        if np.any(p <= self.lo + margin) or np.any(p >= self.hi - margin):
            return False
        for ob in self.obstacles:
            if isinstance(ob, Cylinder):
                inside_z = ob.z0 - margin < p[2] < ob.z1 + margin
                if inside_z and np.hypot(*(p[:2] - ob.center)) < ob.radius + margin:
                    return False
            elif np.all(p > ob.lo - margin) and np.all(p < ob.hi + margin):
                return False
        return True

    def free_space(self, resolution: float = 0.1, z: float = 1.0, margin: float = 0.1) -> np.ndarray:
        """Boolean raster of walkable (x, y) cells at height ``z``, rows indexed by y."""
        xs = np.arange(self.lo[0] + resolution / 2, self.hi[0], resolution)
        ys = np.arange(self.lo[1] + resolution / 2, self.hi[1], resolution)
        return np.array([[self.is_free((x, y, z), margin) for x in xs] for y in ys])

    def scaled(self, kx: float, ky: float, about=(0.0, 0.0)) -> "Scene":
        """The same scene with x, y scaled about ``about`` (textures follow the geometry)."""
        ax, ay = float(about[0]), float(about[1])

        def tf(p):
            p = np.array(p, dtype=np.float64)
            p[0] = ax + kx * (p[0] - ax)
            p[1] = ay + ky * (p[1] - ay)
            return p

        obstacles = []
        for ob in self.obstacles:
            if isinstance(ob, Cylinder):
                if kx != ky:
                    raise SceneError("anisotropic scaling of cylinders is not supported")
                c = tf([ob.center[0], ob.center[1], 0.0])[:2]
                obstacles.append(Cylinder(c, ob.radius * kx, ob.z0, ob.z1))
            else:
                obstacles.append(Box(tf(ob.lo), tf(ob.hi)))
        sx, sy = self.tex_scale
        # compose texture maps: new -> old -> original
        old_ax, old_ay = self.tex_about
        if (sx, sy) != (1.0, 1.0) and (old_ax, old_ay) != (ax, ay):
            raise SceneError("nested scalings must share the same center")
        return Scene(tf(self.lo), tf(self.hi), obstacles, copy.deepcopy(self.materials),
                     (sx * kx, sy * ky), (ax, ay))


def _parse_obstacle(obj: dict):
    kind = obj.get("type", "box")
    if kind == "box":
        return Box(np.asarray(obj["min"], float), np.asarray(obj["max"], float))
    if kind == "cylinder":
        z0, z1 = obj["z"]
        return Cylinder(np.asarray(obj["center"], float), float(obj["radius"]), float(z0), float(z1))
    raise SceneError(f"unknown obstacle type {kind!r}")


def _overlap(a, b, margin: float) -> bool:
    return bool(np.all(a.lo - margin < b.hi) and np.all(b.lo - margin < a.hi))


def build_scene(spec: dict, seed: int = 0) -> "SceneHandle":
    """Validate a scene spec and place any random obstacles deterministically."""
    try:
        room = spec["room"]
        w, d, h = float(room["width"]), float(room["depth"]), float(room["height"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SceneError(f"invalid room spec: {exc}") from exc
    if min(w, d, h) <= 0:
        raise SceneError("room dimensions must be positive")
    lo = np.array([-w / 2, -d / 2, 0.0])
    hi = np.array([w / 2, d / 2, h])
    obstacles = [_parse_obstacle(o) for o in spec.get("obstacles", [])]
    materials = copy.deepcopy(spec.get("materials", {}))
    for m in materials.values():
        if m.get("kind", "checker") not in ("checker", "solid"):
            raise SceneError(f"unknown material kind {m.get('kind')!r}")

    rnd = spec.get("random_obstacles")
    if rnd:
        rng = np.random.default_rng(seed)
        count = int(rnd.get("count", 0))
        smin, smax = rnd.get("size", [0.3, 0.8])
        margin = float(rnd.get("margin", 0.2))
        keep_clear = rnd.get("keep_clear", [[0.0, 0.0]])
        clear_r = float(rnd.get("clear_radius", 0.6))
        placed = 0
        for _ in range(2000 * max(count, 1)):
            if placed == count:
                break
            size = rng.uniform(smin, smax, size=3)
            size[2] = rng.uniform(0.5, min(h - 0.2, 2.0))
            xy = rng.uniform(lo[:2] + margin + size[:2] / 2, hi[:2] - margin - size[:2] / 2)
            cand = Box(np.array([xy[0] - size[0] / 2, xy[1] - size[1] / 2, 0.001]),
                       np.array([xy[0] + size[0] / 2, xy[1] + size[1] / 2, size[2]]))
            if any(_overlap(cand, o, margin) for o in obstacles):
                continue
            if any(np.all(np.abs(np.asarray(c) - xy) < size[:2] / 2 + clear_r) for c in keep_clear):
                continue
            obstacles.append(cand)
            placed += 1
        if placed < count:
            raise SceneError(f"could only place {placed} of {count} random obstacles")
    return SceneHandle(Scene(lo, hi, obstacles, materials))


def load_scene_spec(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _hash01(*ints) -> np.ndarray:
    """Deterministic per-tile pseudo-random numbers in [0, 1)."""
    x = np.zeros(np.broadcast(*ints).shape, dtype=np.uint64)
    with np.errstate(over="ignore"):
        for i, v in enumerate(ints):
            x ^= (np.asarray(v).astype(np.int64).astype(np.uint64) + np.uint64(0x9E3779B97F4A7C15 * (i + 1) % 2**64))
            x *= np.uint64(0xBF58476D1CE4E5B9)
            x ^= x >> np.uint64(31)
            x *= np.uint64(0x94D049BB133111EB)
            x ^= x >> np.uint64(29)
    return (x >> np.uint64(11)).astype(np.float64) / float(2**53)


def cast_rays(scene: Scene, origin: np.ndarray, dirs: np.ndarray):
    """Nearest hits along unit ``dirs`` from ``origin``.

    Returns ``(t, normal, surface, obstacle_index)``; ``obstacle_index`` is -1
    for room surfaces.
    """
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = d.shape[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        # room: exit distance per axis
        t_axes = np.where(d > 0, (scene.hi - o) * inv, np.where(d < 0, (scene.lo - o) * inv, np.inf))
    axis = np.argmin(t_axes, axis=1)
    t = t_axes[np.arange(n), axis]
    normal = np.zeros((n, 3))
    normal[np.arange(n), axis] = -np.sign(d[np.arange(n), axis])
    surface = np.full(n, WALL)
    surface[(axis == 2) & (d[:, 2] < 0)] = FLOOR
    surface[(axis == 2) & (d[:, 2] > 0)] = CEILING
    which = np.full(n, -1)

    eps = 1e-9
    for idx, ob in enumerate(scene.obstacles):
        if isinstance(ob, Cylinder):
            th, nh = _hit_cylinder(ob, o, d)
        else:
            with np.errstate(divide="ignore", invalid="ignore"):
                t1 = (ob.lo - o) * inv
                t2 = (ob.hi - o) * inv
            tlo = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
            thi = np.where(np.isnan(t1), np.inf, np.maximum(t1, t2))
            ax = np.argmax(tlo, axis=1)
            tmin = tlo[np.arange(n), ax]
            tmax = np.min(thi, axis=1)
            hit = (tmax >= tmin) & (tmin > eps)
            th = np.where(hit, tmin, np.inf)
            nh = np.zeros((n, 3))
            nh[np.arange(n), ax] = -np.sign(d[np.arange(n), ax])
        closer = th < t
        t = np.where(closer, th, t)
        normal[closer] = nh[closer]
        surface[closer] = OBSTACLE
        which[closer] = idx
    return t, normal, surface, which


def _hit_cylinder(cyl: Cylinder, o: np.ndarray, d: np.ndarray):
    n = d.shape[0]
    t_best = np.full(n, np.inf)
    nrm = np.zeros((n, 3))
    oc = o[:2] - cyl.center
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = 2.0 * (d[:, :2] @ oc)
    c = oc @ oc - cyl.radius**2
    disc = b * b - 4 * a * c
    with np.errstate(invalid="ignore", divide="ignore"):
        sq = np.sqrt(np.maximum(disc, 0.0))
        t_side = (-b - sq) / (2 * a)
    z = o[2] + t_side * d[:, 2]
    side = (disc >= 0) & (a > 1e-15) & (t_side > 1e-9) & (z >= cyl.z0) & (z <= cyl.z1)
    t_best = np.where(side, t_side, t_best)
    p = o[:2] + t_side[:, None] * d[:, :2]
    radial = (p - cyl.center) / cyl.radius
    nrm[side, :2] = radial[side]
    for zc, sgn in ((cyl.z1, 1.0), (cyl.z0, -1.0)):
        with np.errstate(divide="ignore", invalid="ignore"):
            tc = (zc - o[2]) / d[:, 2]
        pc = o[:2] + tc[:, None] * d[:, :2]
        inside = np.sum((pc - cyl.center) ** 2, axis=1) <= cyl.radius**2
        cap = (tc > 1e-9) & inside & (tc < t_best) & np.isfinite(tc)
        t_best = np.where(cap, tc, t_best)
        nrm[cap] = [0.0, 0.0, sgn]
    return t_best, nrm


def shade(scene: Scene, points: np.ndarray, normal: np.ndarray, surface: np.ndarray,
          which: np.ndarray) -> np.ndarray:
    """Flat-shaded albedo with per-tile jittered checkers."""
    n = points.shape[0]
    sx, sy = scene.tex_scale
    ax, ay = scene.tex_about
    p = points.copy()
    p[:, 0] = ax + (p[:, 0] - ax) / sx
    p[:, 1] = ay + (p[:, 1] - ay) / sy
    axis = np.argmax(np.abs(normal), axis=1)
    # 2D texture coordinates on the hit surface
    a = np.where(axis == 0, p[:, 1], p[:, 0])
    b = np.where(axis == 2, p[:, 1], p[:, 2])
    for idx, ob in enumerate(scene.obstacles):
        if isinstance(ob, Cylinder):
            on_side = (which == idx) & (np.abs(normal[:, 2]) < 0.5)
            ang = np.arctan2(p[:, 1] - ob.center[1], p[:, 0] - ob.center[0])
            a = np.where(on_side, ang * ob.radius / sx, a)
            b = np.where(on_side, p[:, 2], b)
    rgb = np.zeros((n, 3))
    for sid in (FLOOR, CEILING, WALL, OBSTACLE):
        sel = surface == sid
        if not sel.any():
            continue
        mat = scene.material(sid)
        colors = np.asarray(mat.get("colors", DEFAULT_MATERIAL["colors"]), dtype=np.float64)
        size = float(mat.get("size", DEFAULT_MATERIAL["size"]))
        jitter = float(mat.get("jitter", 0.0))
        if mat.get("kind", "checker") == "solid":
            base = np.broadcast_to(colors[0], (sel.sum(), 3)).copy()
        else:
            ia = np.floor(a[sel] / size).astype(np.int64)
            ib = np.floor(b[sel] / size).astype(np.int64)
            parity = (ia + ib) & 1
            base = colors[parity]
            if jitter > 0:
                face = axis[sel] * 2 + (normal[sel, axis[sel]] > 0) + 8 * (which[sel] + 1)
                r = _hash01(ia, ib, face)
                base = base * (1.0 - jitter + 2.0 * jitter * r)[:, None]
        lam = 0.6 + 0.4 * np.abs(normal[sel] @ _LIGHT)
        rgb[sel] = base * lam[:, None]
    return np.clip(rgb, 0.0, 1.0)


class SceneHandle:
    """A built scene plus the registry of panoramas rendered from it."""

    def __init__(self, scene: Scene):
        self.scene = scene
        self.registry: dict[tuple, tuple[Panorama, DepthMap]] = {}
        self._by_image: dict[bytes, DepthMap] = {}

    @staticmethod
    def pose_key(pose: Pose) -> tuple:
        return tuple(np.round(np.concatenate([pose.rotation.ravel(), pose.translation]), 9).tolist())

    @staticmethod
    def image_key(pano: Panorama) -> bytes:
        return hashlib.sha1(np.ascontiguousarray(pano.rgb).tobytes()).digest()

    def register(self, pose: Pose, pano: Panorama, depth: DepthMap) -> None:
        self.registry[self.pose_key(pose)] = (pano, depth)
        self._by_image[self.image_key(pano)] = depth

    def lookup(self, pose: Pose) -> tuple[Panorama, DepthMap]:
        try:
            return self.registry[self.pose_key(pose)]
        except KeyError:
            raise KeyError("pose not registered with this scene") from None

    def lookup_image(self, pano: Panorama) -> DepthMap | None:
        return self._by_image.get(self.image_key(pano))

    def to_bytes(self) -> bytes:
        return self.scene.to_bytes()


def render(scene: Scene, pose: Pose, width: int, height: int) -> tuple[Panorama, DepthMap]:
    """Ray cast every pixel center; no free-space check, no registration."""
    if width != 2 * height:
        raise GeometryError("width must be 2*height")
    dirs = sphere_grid(height, width).reshape(-1, 3) @ pose.rotation.T
    t, normal, surface, which = cast_rays(scene, pose.translation, dirs)
    pts = pose.translation + t[:, None] * dirs
    rgb = shade(scene, pts, normal, surface, which).reshape(height, width, 3)
    depth = DepthMap(t.reshape(height, width))
    return Panorama(rgb, depth), depth


def render_panorama(handle: SceneHandle, pose: Pose, width: int, height: int,
                    margin: float = 0.05) -> tuple[Panorama, DepthMap]:
    if not handle.scene.is_free(pose.translation, margin):
        raise SceneError(f"camera position {pose.translation.tolist()} is not in free space")
    pano, depth = render(handle.scene, pose, width, height)
    handle.register(pose, pano, depth)
    return pano, depth


def surface_distance(scene: Scene, points: np.ndarray) -> np.ndarray:
    """Distance from world points to the nearest scene surface (boxes only for obstacles)."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    best = np.min(np.minimum(np.abs(p - scene.lo), np.abs(p - scene.hi)), axis=1)
    for ob in scene.obstacles:
        if isinstance(ob, Cylinder):
            r = np.hypot(p[:, 0] - ob.center[0], p[:, 1] - ob.center[1])
            dz = np.maximum(np.maximum(ob.z0 - p[:, 2], p[:, 2] - ob.z1), 0.0)
            side = np.where(dz > 0, np.hypot(np.maximum(r - ob.radius, 0), dz), np.abs(r - ob.radius))
            cap = np.where(r <= ob.radius, np.minimum(np.abs(p[:, 2] - ob.z0), np.abs(p[:, 2] - ob.z1)), np.inf)
            best = np.minimum(best, np.minimum(side, cap))
        else:
            outside = np.maximum(np.maximum(ob.lo - p, p - ob.hi), 0.0)
            dist_out = np.linalg.norm(outside, axis=1)
            inside = np.all((p >= ob.lo) & (p <= ob.hi), axis=1)
            dist_in = np.min(np.minimum(p - ob.lo, ob.hi - p), axis=1)
            best = np.minimum(best, np.where(inside, dist_in, dist_out))
    return best


def room_spec(width: float, depth: float, height: float, **extra) -> dict:
    spec = {"room": {"width": width, "depth": depth, "height": height}}
    spec.update(extra)
    return spec
