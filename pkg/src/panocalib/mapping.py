"""2D occupancy mapping from panoramic depth: local grids, scan matching,
global stitching and fixed-trajectory SLAM runs.

Grids live on a lattice whose cell centers sit at integer multiples of the
resolution in their own frame; ``origin`` is the center of cell (row 0, col 0)
and rows run along +y.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import kernels
from .geometry import DepthMap, Pose, backproject, rot_z

UNKNOWN, FREE, OCCUPIED = -1, 0, 1
ACTIONS = ("forward", "turn_left", "turn_right")


class MappingError(ValueError):
    pass


def wrap_angle(theta: float) -> float:
    """Wrap into (-pi, pi]."""
    t = float(np.mod(theta + np.pi, 2 * np.pi) - np.pi)
    return np.pi if t == -np.pi else t


@dataclass(frozen=True)
class Pose2D:
    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    def compose(self, d: "Pose2D") -> "Pose2D":
        c, s = np.cos(self.theta), np.sin(self.theta)
        return Pose2D(self.x + c * d.x - s * d.y, self.y + s * d.x + c * d.y, self.theta + d.theta)

    def inverse(self) -> "Pose2D":
        c, s = np.cos(self.theta), np.sin(self.theta)
        return Pose2D(-(c * self.x + s * self.y), s * self.x - c * self.y, -self.theta)

    def relative_to(self, ref: "Pose2D") -> "Pose2D":
        """This pose expressed in the frame of ``ref``."""
        return ref.inverse().compose(self)

    def apply(self, pts: np.ndarray) -> np.ndarray:
        c, s = np.cos(self.theta), np.sin(self.theta)
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        return pts @ np.array([[c, s], [-s, c]]) + [self.x, self.y]

    def to_pose3d(self, z: float) -> Pose:
        return Pose(rot_z(self.theta), (self.x, self.y, z))

    def as_tuple(self) -> tuple:
        return (self.x, self.y, self.theta)


@dataclass(frozen=True)
class OdomReading:
    delta: Pose2D
    noise_model: tuple = (0.0, 0.0)  # (sigma_xy m, sigma_theta rad)

    def __post_init__(self) -> None:
        if min(self.noise_model) < 0:
            raise MappingError("odometry noise must be >= 0")


@dataclass
class GridConfig:
    resolution: float = 0.05
    half_extent: float = 6.0
    h_lo: float = -0.8
    h_hi: float = 0.5
    camera_height: float = 1.0
    max_range: float | None = None

    def __post_init__(self) -> None:
        if self.resolution <= 0:
            raise MappingError("resolution must be > 0")
        if self.h_lo >= self.h_hi:
            raise MappingError("need h_lo < h_hi")


@dataclass
class OccGrid:
    cells: np.ndarray  # int8, rows along +y
    resolution: float = 0.05
    origin: tuple = (0.0, 0.0)
    # occupied evidence in the grid frame, kept so stitching rasterizes once
    points: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.cells = np.asarray(self.cells, dtype=np.int8)
        if self.cells.ndim != 2:
            raise MappingError("cells must be 2D")
        if self.resolution <= 0:
            raise MappingError("resolution must be > 0")
        self.origin = (float(self.origin[0]), float(self.origin[1]))

    @property
    def shape(self) -> tuple:
        return self.cells.shape

    def centers(self, mask: np.ndarray) -> np.ndarray:
        rows, cols = np.nonzero(mask)
        return np.column_stack([self.origin[0] + cols * self.resolution, self.origin[1] + rows * self.resolution])

    def occupied_centers(self) -> np.ndarray:
        return self.centers(self.cells == OCCUPIED)

    def cell_of(self, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        col = np.rint((xy[:, 0] - self.origin[0]) / self.resolution).astype(np.int64)
        row = np.rint((xy[:, 1] - self.origin[1]) / self.resolution).astype(np.int64)
        return row, col

    def copy(self) -> "OccGrid":
        pts = None if self.points is None else self.points.copy()
        return OccGrid(self.cells.copy(), self.resolution, self.origin, pts)

    @classmethod
    def empty(cls, resolution: float = 0.05) -> "OccGrid":
        return cls(np.full((0, 0), UNKNOWN, dtype=np.int8), resolution, (0.0, 0.0))


def depth_to_local_grid(depth: DepthMap, cfg: GridConfig | None = None) -> OccGrid:
    """Egocentric grid: in-band points mark occupied cells, rays to every
    visible point's footprint mark free cells, the rest stays unknown."""
    cfg = cfg or GridConfig()
    n = int(np.ceil(cfg.half_extent / cfg.resolution))
    size = 2 * n + 1
    origin = (-n * cfg.resolution, -n * cfg.resolution)
    cells = np.full((size, size), UNKNOWN, dtype=np.int8)
    if not depth.valid.any():
        return OccGrid(cells, cfg.resolution, origin, np.zeros((0, 2)))
    pts = backproject(depth).points
    if cfg.max_range is not None:
        pts = pts[np.linalg.norm(pts[:, :2], axis=1) <= cfg.max_range]
    grid = OccGrid(cells, cfg.resolution, origin)
    row, col = grid.cell_of(pts[:, :2])
    inside = (row >= 0) & (row < size) & (col >= 0) & (col < size)
    ends = np.unique(np.column_stack([row, col])[inside], axis=0)
    free = kernels.trace_free(size, size, n, n, ends)
    band = inside & (pts[:, 2] >= cfg.h_lo) & (pts[:, 2] <= cfg.h_hi)
    occ = np.zeros((size, size), dtype=bool)
    occ[row[band], col[band]] = True
    # footprints of floor/ceiling hits are free too
    seen = np.zeros((size, size), dtype=bool)
    seen[row[inside], col[inside]] = True
    cells[free | seen] = FREE
    cells[occ] = OCCUPIED
    return OccGrid(cells, cfg.resolution, origin, pts[band, :2].copy())


@dataclass
class ScanMatch:
    pose: Pose2D
    inlier_fraction: float
    fallback: bool
    icp_pose: Pose2D | None = None


def _procrustes2d(p: np.ndarray, q: np.ndarray) -> Pose2D:
    mp, mq = p.mean(axis=0), q.mean(axis=0)
    h = (p - mp).T @ (q - mq)
    theta = np.arctan2(h[0, 1] - h[1, 0], h[0, 0] + h[1, 1])
    c, s = np.cos(theta), np.sin(theta)
    t = mq - np.array([[c, -s], [s, c]]) @ mp
    return Pose2D(t[0], t[1], theta)


def _line_normals(pts: np.ndarray, tree: cKDTree, k: int = 6) -> tuple[np.ndarray, np.ndarray]:
    """Unit normals of local line fits; the bool mask flags well-defined lines."""
    k = min(k, len(pts))
    _, idx = tree.query(pts, k=k)
    nb = pts[np.asarray(idx).reshape(len(pts), k)]
    c = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", c, c)
    evals, evecs = np.linalg.eigh(cov)
    return evecs[:, :, 0], evals[:, 0] < 0.2 * np.maximum(evals[:, 1], 1e-300)


def icp2d(src: np.ndarray, dst: np.ndarray, init: Pose2D, iters: int = 30, max_dist: float = 0.3,
          tol: float = 1e-9, point_to_line: bool = True) -> tuple[Pose2D, float]:
    """ICP aligning ``src`` onto ``dst``; returns (pose, inlier fraction).

    Point-to-point iterations converge first; point-to-line iterations then
    remove the bias that sparse, differently sampled walls leave behind.
    """
    tree = cKDTree(dst)
    pose = init
    for _ in range(iters):
        dist, nn = tree.query(pose.apply(src))
        inl = dist < max_dist
        if inl.sum() < 3:
            break
        new = _procrustes2d(src[inl], dst[nn[inl]])
        done = (abs(new.x - pose.x) + abs(new.y - pose.y) + abs(wrap_angle(new.theta - pose.theta))) < tol
        pose = new
        if done:
            break
    if point_to_line and len(dst) >= 3:
        normals, ok = _line_normals(dst, tree)
        for _ in range(iters):
            moved = pose.apply(src)
            dist, nn = tree.query(moved)
            inl = (dist < max_dist) & ok[nn]
            if inl.sum() < 3:
                break
            n = normals[nn[inl]]
            m = moved[inl]
            r = np.einsum("ni,ni->n", n, m - dst[nn[inl]])
            # small-angle increment about the world origin: [dx, dy, dtheta]
            jac = np.column_stack([n[:, 0], n[:, 1], n[:, 1] * m[:, 0] - n[:, 0] * m[:, 1]])
            delta, *_ = np.linalg.lstsq(jac, -r, rcond=None)
            step = Pose2D(delta[0], delta[1], delta[2])
            pose = step.compose(pose)
            if np.abs(delta).sum() < tol:
                break
    dist, _ = tree.query(pose.apply(src))
    return pose, float((dist < max_dist).mean())


def _fuse(icp: Pose2D, odom: OdomReading, sigma_icp: tuple) -> Pose2D:
    """Inverse-variance blend of the scan-match and odometry increments."""
    s_xy, s_th = odom.noise_model
    out = []
    for a, b, s_odom, s_m in ((icp.x, odom.delta.x, s_xy, sigma_icp[0]), (icp.y, odom.delta.y, s_xy, sigma_icp[0])):
        out.append(b if s_odom == 0 else (a / s_m**2 + b / s_odom**2) / (1 / s_m**2 + 1 / s_odom**2))
    if s_th == 0:
        th = odom.delta.theta
    else:
        dth = wrap_angle(icp.theta - odom.delta.theta)
        w = (1 / sigma_icp[1] ** 2) / (1 / sigma_icp[1] ** 2 + 1 / s_th**2)
        th = odom.delta.theta + w * dth
    return Pose2D(out[0], out[1], th)


def cell_centroids(pts: np.ndarray, resolution: float) -> np.ndarray:
    """Mean of the points falling in each occupied cell."""
    keys = np.rint(pts / resolution).astype(np.int64)
    _, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inv = inv.ravel()
    sums = np.zeros((len(counts), 2))
    np.add.at(sums, inv, pts)
    return sums / counts[:, None]


def match_scans(prev: OccGrid, cur: OccGrid, odom: OdomReading, min_inliers: float = 0.3,
                max_dist: float | None = None) -> ScanMatch:
    """Relative pose of ``cur`` in ``prev``'s frame: ICP from the odometry guess,
    blended with odometry by their noise levels."""
    p = cur.points if cur.points is not None and len(cur.points) else cur.occupied_centers()
    q = prev.points if prev.points is not None and len(prev.points) else prev.occupied_centers()
    if len(p) < 3 or len(q) < 3:
        return ScanMatch(odom.delta, 0.0, True)
    p, q = cell_centroids(p, cur.resolution), cell_centroids(q, prev.resolution)
    max_dist = max_dist if max_dist is not None else max(6 * cur.resolution, 3 * odom.noise_model[0])
    icp, frac = icp2d(p, q, odom.delta, max_dist=max_dist)
    if frac < min_inliers:
        return ScanMatch(odom.delta, frac, True, icp)
    sigma_icp = (cur.resolution / 4, np.deg2rad(0.25))
    return ScanMatch(_fuse(icp, odom, sigma_icp), frac, False, icp)


def estimate_pose(prev: OccGrid, cur: OccGrid, odom: OdomReading) -> Pose2D:
    return match_scans(prev, cur, odom).pose


def _grow(g: OccGrid, lo: np.ndarray, hi: np.ndarray) -> OccGrid:
    """Extend ``g`` (world-anchored lattice) to cover the box [lo, hi]."""
    res = g.resolution
    lo_c = np.floor(lo / res).astype(np.int64)
    hi_c = np.ceil(hi / res).astype(np.int64)
    if g.cells.size:
        o = np.rint(np.array(g.origin) / res).astype(np.int64)
        lo_c = np.minimum(lo_c, o)
        hi_c = np.maximum(hi_c, o + [g.shape[1] - 1, g.shape[0] - 1])
    cells = np.full((hi_c[1] - lo_c[1] + 1, hi_c[0] - lo_c[0] + 1), UNKNOWN, dtype=np.int8)
    if g.cells.size:
        r0, c0 = o[1] - lo_c[1], o[0] - lo_c[0]
        cells[r0:r0 + g.shape[0], c0:c0 + g.shape[1]] = g.cells
    return OccGrid(cells, res, (lo_c[0] * res, lo_c[1] * res))


def stitch_global(g: OccGrid, local: OccGrid, pose: Pose2D) -> OccGrid:
    """Fuse a local grid placed at ``pose`` into the world grid ``g``.

    Free/unknown cells are pulled from the local grid at each world cell
    center; occupied evidence is pushed by transforming the local points (or
    occupied cell centers). Fusion keeps the max of occupied > free > unknown.
    """
    if g.cells.size and not np.isclose(g.resolution, local.resolution):
        raise MappingError("grid resolutions differ")
    res = local.resolution
    rows, cols = local.shape
    corners = np.array([[0, 0], [cols - 1, 0], [0, rows - 1], [cols - 1, rows - 1]], dtype=np.float64) * res
    corners = pose.apply(corners + local.origin)
    occ_pts = local.points if local.points is not None else local.occupied_centers()
    occ_world = pose.apply(occ_pts) if len(occ_pts) else np.zeros((0, 2))
    ext = np.vstack([corners, occ_world])
    out = _grow(g if g.cells.size else OccGrid.empty(res), ext.min(axis=0), ext.max(axis=0))
    # pull: every world cell center looks up the local cell containing it
    wr, wc = np.indices(out.shape)
    world = np.column_stack([out.origin[0] + wc.ravel() * res, out.origin[1] + wr.ravel() * res])
    loc = pose.inverse().apply(world)
    lr, lc = local.cell_of(loc)
    ok = (lr >= 0) & (lr < rows) & (lc >= 0) & (lc < cols)
    pulled = np.full(world.shape[0], UNKNOWN, dtype=np.int8)
    pulled[ok] = np.where(local.cells[lr[ok], lc[ok]] == FREE, FREE, UNKNOWN)
    cells = np.maximum(out.cells, pulled.reshape(out.shape))
    if len(occ_world):
        r, c = out.cell_of(occ_world)
        cells[r, c] = OCCUPIED
    return OccGrid(cells, res, out.origin)


def align_grids(a: OccGrid, b: OccGrid) -> tuple[np.ndarray, np.ndarray]:
    """Both grids' cell rasters on their common world-anchored bounding box."""
    if not np.isclose(a.resolution, b.resolution):
        raise MappingError("grid resolutions differ")
    res = a.resolution
    boxes = []
    for g in (a, b):
        o = np.array(g.origin)
        boxes.append((o, o + [(g.shape[1] - 1) * res, (g.shape[0] - 1) * res]))
    lo = np.minimum(boxes[0][0], boxes[1][0])
    hi = np.maximum(boxes[0][1], boxes[1][1])
    return _grow(a, lo, hi).cells, _grow(b, lo, hi).cells


@dataclass
class MapMetrics:
    chamfer2d: float
    mae: float
    psnr: float
    iou: float

    def as_row(self) -> str:
        return f"{self.chamfer2d!r},{self.mae!r},{self.psnr!r},{self.iou!r}"


def map_metrics(est: OccGrid, gt: OccGrid) -> MapMetrics:
    """2D Chamfer (symmetric mean over occupied centers), occupancy MAE, PSNR, IoU."""
    a, b = align_grids(est, gt)
    oa, ob = a == OCCUPIED, b == OCCUPIED
    if not oa.any() or not ob.any():
        raise MappingError("both grids need occupied cells")
    res = est.resolution
    pa = np.argwhere(oa) * res
    pb = np.argwhere(ob) * res
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    chamfer = 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))
    mse = float(np.mean(oa != ob))
    psnr = float("inf") if mse == 0 else float(10 * np.log10(1.0 / mse))
    iou = float((oa & ob).sum() / (oa | ob).sum())
    return MapMetrics(chamfer, mse, psnr, iou)


def scene_occupancy(scene, like: OccGrid, z: float = 1.0, h_lo: float = -0.8, h_hi: float = 0.5) -> OccGrid:
    """Analytic occupied cells on ``like``'s lattice: the cells containing a
    surface of the room walls or of an obstacle that spans the height band."""
    res = like.resolution
    rows, cols = np.indices(like.shape)
    x = like.origin[0] + cols * res
    y = like.origin[1] + rows * res
    half = res / 2
    lo, hi = scene.lo, scene.hi
    inside_x = (x >= lo[0] - half) & (x <= hi[0] + half)
    inside_y = (y >= lo[1] - half) & (y <= hi[1] + half)
    occ = ((np.abs(x - lo[0]) <= half) | (np.abs(x - hi[0]) <= half)) & inside_y
    occ |= ((np.abs(y - lo[1]) <= half) | (np.abs(y - hi[1]) <= half)) & inside_x
    zlo, zhi = z + h_lo, z + h_hi
    for ob in scene.obstacles:
        if hasattr(ob, "radius"):
            if ob.z1 < zlo or ob.z0 > zhi:
                continue
            r = np.hypot(x - ob.center[0], y - ob.center[1])
            occ |= np.abs(r - ob.radius) <= half * np.sqrt(2)
        else:
            if ob.hi[2] < zlo or ob.lo[2] > zhi:
                continue
            in_x = (x >= ob.lo[0] - half) & (x <= ob.hi[0] + half)
            in_y = (y >= ob.lo[1] - half) & (y <= ob.hi[1] + half)
            edge_x = (np.abs(x - ob.lo[0]) <= half) | (np.abs(x - ob.hi[0]) <= half)
            edge_y = (np.abs(y - ob.lo[1]) <= half) | (np.abs(y - ob.hi[1]) <= half)
            occ |= (edge_x & in_y) | (edge_y & in_x)
    cells = np.where(occ, OCCUPIED, FREE).astype(np.int8)
    return OccGrid(cells, res, like.origin)


@dataclass
class TrajectorySpec:
    actions: list
    step: float = 0.25
    turn: float = np.deg2rad(10.0)
    start: Pose2D = field(default_factory=Pose2D)

    def __post_init__(self) -> None:
        if not self.actions:
            raise MappingError("trajectory needs at least one action")
        bad = [a for a in self.actions if a not in ACTIONS]
        if bad:
            raise MappingError(f"unknown actions {sorted(set(bad))}")

    def increment(self, action: str) -> Pose2D:
        if action == "forward":
            return Pose2D(self.step, 0.0, 0.0)
        return Pose2D(0.0, 0.0, self.turn if action == "turn_left" else -self.turn)

    def to_json(self) -> dict:
        return {"actions": list(self.actions), "step": self.step, "turn_deg": float(np.rad2deg(self.turn)),
                "start": list(self.start.as_tuple())}

    @classmethod
    def from_json(cls, obj) -> "TrajectorySpec":
        if isinstance(obj, list):
            return cls(obj)
        start = Pose2D(*obj.get("start", (0.0, 0.0, 0.0)))
        return cls(list(obj["actions"]), float(obj.get("step", 0.25)), np.deg2rad(float(obj.get("turn_deg", 10.0))),
                   start)


def loop_trajectory(side_steps: int, laps: int = 1, start: Pose2D = Pose2D()) -> TrajectorySpec:
    """Square loop: ``side_steps`` forwards then a 90 degree left turn, repeated."""
    side = ["forward"] * side_steps + ["turn_left"] * 9
    return TrajectorySpec(side * 4 * laps, start=start)


@dataclass
class SlamResult:
    grid: OccGrid
    est_poses: list
    gt_poses: list
    log: list  # (panorama, action) per executed step, for navigation calibration
    collisions: int = 0
    fallbacks: int = 0

    def final_error(self) -> float:
        a, b = self.est_poses[-1], self.gt_poses[-1]
        return float(np.hypot(a.x - b.x, a.y - b.y))


def run_fixed_trajectory_slam(scene, traj: TrajectorySpec, predictor, odom_noise=(0.0, 0.0), seed: int = 0,
                              width: int = 256, height: int = 128, grid_cfg: GridConfig | None = None,
                              log_size: tuple | None = None, use_gt_poses: bool = False) -> SlamResult:
    """Drive ``traj`` through ``scene`` (a SceneHandle), mapping from predicted depth.

    ``predictor`` maps a rendered panorama to depth. ``log_size`` optionally
    renders an extra (width, height) copy of each frame for the agent log.
    ``use_gt_poses`` stitches at the true poses (reference maps).
    """
    from .scenegen import render_panorama  # local import keeps mapping free of scene deps

    cfg = grid_cfg or GridConfig()
    rng = np.random.default_rng(seed)
    s_xy, s_th = odom_noise
    gt = traj.start
    est = traj.start
    if not scene.scene.is_free((gt.x, gt.y, cfg.camera_height)):
        raise MappingError("trajectory start is not in free space")

    def observe(pose: Pose2D):
        p3 = pose.to_pose3d(cfg.camera_height)
        pano, _ = render_panorama(scene, p3, width, height)
        small = pano
        if log_size is not None:
            small, _ = render_panorama(scene, p3, *log_size)
        return pano, small, depth_to_local_grid(predictor.predict(pano), cfg)

    pano, small, local = observe(gt)
    g = stitch_global(OccGrid.empty(cfg.resolution), local, est)
    est_poses, gt_poses, log = [est], [gt], [(small, "start")]
    collisions = fallbacks = 0
    for action in traj.actions:
        inc = traj.increment(action)
        nxt = gt.compose(inc)
        if not scene.scene.is_free((nxt.x, nxt.y, cfg.camera_height), 0.15):
            collisions += 1
            continue
        noisy = Pose2D(inc.x + (rng.normal(0, s_xy) if s_xy else 0.0),
                       inc.y + (rng.normal(0, s_xy) if s_xy else 0.0),
                       inc.theta + (rng.normal(0, s_th) if s_th else 0.0))
        gt = nxt
        prev_local = local
        pano, small, local = observe(gt)
        if use_gt_poses:
            est = gt
        else:
            m = match_scans(prev_local, local, OdomReading(noisy, (s_xy, s_th)))
            fallbacks += m.fallback
            est = est.compose(m.pose)
        g = stitch_global(g, local, est)
        est_poses.append(est)
        gt_poses.append(gt)
        log.append((small, action))
    return SlamResult(g, est_poses, gt_poses, log, collisions, fallbacks)
