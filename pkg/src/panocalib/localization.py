"""Map-free localization against a single depth-predicted reference panorama.

A pool of synthetic views is rendered from the reference image and its
predicted depth. A query is matched to the best pool views by a global
descriptor, then to their local features, whose 3D points (in the reference
camera frame) give 2D-3D correspondences for a bearing-vector PnP.

Poses follow the usual convention: ``p_ref = R @ p_cam + t``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import kernels
from .geometry import Panorama, PointCloud, Pose, backproject, pixels_to_dirs, rot_z
from .synth import warp_panorama

GLOBAL_ROWS, GLOBAL_COLS, GLOBAL_BINS = 8, 16, 4
PATCH = 31
N_BITS = 256
# modes per axis: rows reflect at the poles, columns wrap around the seam
_MODES = ("reflect", "wrap")


class LocalizationError(ValueError):
    pass


@dataclass
class GlobalDesc:
    vector: np.ndarray
    # cells (row-major over the 8x16 grid) whose content is known; None means all
    cells: np.ndarray | None = None

    def distance(self, other: "GlobalDesc") -> float:
        return float(retrieval_distances(self, other.vector[None], None if other.cells is None else other.cells[None])[0])


@dataclass
class LocalFeature:
    pixel: tuple
    bearing: np.ndarray
    descriptor: np.ndarray
    point3d: np.ndarray | None = None


@dataclass
class FeatureSet:
    """Local features of one image stored column-wise."""

    pixels: np.ndarray  # (n, 2) as (u, v)
    bearings: np.ndarray  # (n, 3)
    descriptors: np.ndarray  # (n, 32) uint8
    responses: np.ndarray
    points: np.ndarray | None = None  # (n, 3) reference-frame points

    def __len__(self) -> int:
        return len(self.pixels)

    def features(self) -> list:
        pts = self.points
        return [LocalFeature((float(u), float(v)), self.bearings[i], self.descriptors[i],
                             None if pts is None else pts[i])
                for i, (u, v) in enumerate(self.pixels)]

    def subset(self, keep: np.ndarray) -> "FeatureSet":
        return FeatureSet(self.pixels[keep], self.bearings[keep], self.descriptors[keep], self.responses[keep],
                          None if self.points is None else self.points[keep])


@dataclass
class LocalizeConfig:
    n_t: int = 100
    n_r: int = 8
    top_k: int = 5
    ransac: tuple = (500, float(np.deg2rad(1.0)))  # (iterations, angular inlier threshold)
    thresholds: tuple = ((0.05, 1.0), (0.3, 5.0), (1.0, 10.0))
    ratio: float = 0.85
    max_features: int = 500
    fill_radius: float = 4.0  # pool views sit metres away from the reference, so splats spread
    min_inliers: int = 6

    def __post_init__(self) -> None:
        if min(self.n_t, self.n_r, self.top_k) < 1:
            raise ValueError("n_t, n_r and top_k must be >= 1")
        if not 0 < self.ratio <= 1:
            raise ValueError("ratio must lie in (0, 1]")


@dataclass
class MapView:
    pose: Pose
    desc: GlobalDesc
    features: FeatureSet
    view: object = None  # the SynthView, only when kept


@dataclass
class ReferenceMap:
    cloud: PointCloud
    views: list
    bbox: tuple  # (lo, hi) of the cloud

    def descriptor_matrix(self) -> np.ndarray:
        return np.stack([v.desc.vector for v in self.views])

    def cell_matrix(self) -> np.ndarray | None:
        if all(v.desc.cells is None for v in self.views):
            return None
        full = np.ones(GLOBAL_ROWS * GLOBAL_COLS, dtype=bool)
        return np.stack([full if v.desc.cells is None else v.desc.cells for v in self.views])


# ---------------------------------------------------------------- features


def _brief_pairs() -> np.ndarray:
    rng = np.random.default_rng(20231)
    half = PATCH // 2
    pairs = np.rint(rng.normal(0.0, PATCH / 5.0, size=(N_BITS, 4)))
    return np.clip(pairs, -half, half).astype(np.int64)  # (dy1, dx1, dy2, dx2)


BRIEF_PAIRS = _brief_pairs()


def global_descriptor(gray: np.ndarray, valid: np.ndarray | None = None) -> GlobalDesc:
    """Gradient-orientation histograms over an 8x16 grid, L2-normalized.

    With a ``valid`` mask, gradients touching invalid pixels are dropped and
    only cells that are at least half valid are marked known.
    """
    h, w = gray.shape
    gx = ndimage.sobel(gray, axis=1, mode=_MODES)
    gy = ndimage.sobel(gray, axis=0, mode=_MODES)
    mag = np.hypot(gx, gy)
    ang = np.mod(np.arctan2(gy, gx), np.pi)
    b = np.minimum((ang / np.pi * GLOBAL_BINS).astype(np.int64), GLOBAL_BINS - 1)
    rows = np.arange(h) * GLOBAL_ROWS // h
    cols = np.arange(w) * GLOBAL_COLS // w
    cell_id = rows[:, None] * GLOBAL_COLS + cols[None, :]
    cells = None
    if valid is not None:
        inner = ndimage.minimum_filter(valid.astype(np.uint8), size=3, mode=_MODES).astype(bool)
        mag = np.where(inner, mag, 0.0)
        frac = np.bincount(cell_id.ravel(), weights=valid.ravel().astype(np.float64),
                           minlength=GLOBAL_ROWS * GLOBAL_COLS) / np.bincount(cell_id.ravel())
        cells = frac >= 0.5
    vec = np.bincount((cell_id * GLOBAL_BINS + b).ravel(), weights=mag.ravel(),
                      minlength=GLOBAL_ROWS * GLOBAL_COLS * GLOBAL_BINS)
    n = np.linalg.norm(vec)
    if n <= 1e-12:
        vec = np.full(vec.shape, 1.0 / np.sqrt(vec.size))
    else:
        vec = vec / n
    return GlobalDesc(vec, cells)


def retrieval_distances(query: GlobalDesc, vectors: np.ndarray, cells: np.ndarray | None) -> np.ndarray:
    """Distance from ``query`` to each row of ``vectors`` over the cells both know.

    Both sides are renormalized on the shared cells; views sharing no cell
    get the maximum distance 2.
    """
    vectors = np.atleast_2d(vectors)
    if cells is None and query.cells is None:
        return np.linalg.norm(vectors - query.vector, axis=1)
    n = len(vectors)
    known = np.ones((n, GLOBAL_ROWS * GLOBAL_COLS), dtype=bool) if cells is None else np.asarray(cells)
    if query.cells is not None:
        known = known & query.cells
    m = np.repeat(known, GLOBAL_BINS, axis=1)
    q = np.where(m, query.vector, 0.0)
    v = np.where(m, vectors, 0.0)
    qn = np.linalg.norm(q, axis=1, keepdims=True)
    vn = np.linalg.norm(v, axis=1, keepdims=True)
    ok = (qn[:, 0] > 1e-12) & (vn[:, 0] > 1e-12)
    d = np.linalg.norm(q / np.maximum(qn, 1e-12) - v / np.maximum(vn, 1e-12), axis=1)
    return np.where(ok, d, 2.0)


def harris_response(gray: np.ndarray, k: float = 0.04) -> np.ndarray:
    gx = ndimage.sobel(gray, axis=1, mode=_MODES)
    gy = ndimage.sobel(gray, axis=0, mode=_MODES)
    sxx = ndimage.gaussian_filter(gx * gx, 1.5, mode=_MODES)
    syy = ndimage.gaussian_filter(gy * gy, 1.5, mode=_MODES)
    sxy = ndimage.gaussian_filter(gx * gy, 1.5, mode=_MODES)
    return sxx * syy - sxy * sxy - k * (sxx + syy) ** 2


def harris_corners(resp: np.ndarray, max_features: int = 500, rel_threshold: float = 1e-3,
                   nms: int = 7, border: int = PATCH // 2 + 1) -> tuple[np.ndarray, np.ndarray]:
    """Corner pixels (row, col) of a response map and their responses, strongest first."""
    h, w = resp.shape
    peak = resp.max()
    if peak <= 0:
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0)
    local_max = resp == ndimage.maximum_filter(resp, size=nms, mode=_MODES)
    keep = local_max & (resp > rel_threshold * peak)
    keep[:border] = False
    keep[h - border:] = False
    r, c = np.nonzero(keep)
    vals = resp[r, c]
    order = np.lexsort((r * w + c, -vals))[:max_features]
    return np.stack([r[order], c[order]], axis=1), vals[order]


def subpixel_offsets(resp: np.ndarray, corners: np.ndarray) -> np.ndarray:
    """Per-axis parabola vertex offsets (drow, dcol), clipped to half a pixel."""
    h, w = resp.shape
    r, c = corners[:, 0], corners[:, 1]
    centre = resp[r, c]
    out = np.zeros((len(corners), 2))
    pairs = ((resp[np.clip(r - 1, 0, h - 1), c], resp[np.clip(r + 1, 0, h - 1), c]),
             (resp[r, np.mod(c - 1, w)], resp[r, np.mod(c + 1, w)]))
    for k, (lo, hi) in enumerate(pairs):
        curv = lo - 2 * centre + hi
        safe = np.where(curv < 0, curv, -1.0)
        out[:, k] = np.clip(np.where(curv < 0, 0.5 * (lo - hi) / safe, 0.0), -0.5, 0.5)
    return out


def brief_descriptors(gray: np.ndarray, corners: np.ndarray) -> np.ndarray:
    """256-bit intensity-comparison descriptors packed into 32 bytes."""
    if len(corners) == 0:
        return np.zeros((0, N_BITS // 8), dtype=np.uint8)
    smooth = ndimage.gaussian_filter(gray, 2.0, mode=_MODES)
    h, w = gray.shape
    r = corners[:, :1]
    c = corners[:, 1:]
    dy1, dx1, dy2, dx2 = BRIEF_PAIRS.T
    a = smooth[np.clip(r + dy1, 0, h - 1), np.mod(c + dx1, w)]
    b = smooth[np.clip(r + dy2, 0, h - 1), np.mod(c + dx2, w)]
    return np.packbits(a < b, axis=1)


def extract_features(image: Panorama, max_features: int = 500,
                     valid: np.ndarray | None = None) -> tuple[GlobalDesc, FeatureSet]:
    """Global descriptor plus Harris corners (sub-pixel) with binary descriptors.

    ``valid`` marks the known pixels of a synthesized view (global descriptor only).
    """
    gray = image.gray()
    resp_map = harris_response(gray)
    corners, resp = harris_corners(resp_map, max_features)
    desc = brief_descriptors(gray, corners)
    h, w = gray.shape
    off = subpixel_offsets(resp_map, corners)
    u = np.mod(corners[:, 1] + off[:, 1], w)
    v = corners[:, 0] + off[:, 0]
    bearings = pixels_to_dirs(u, v, w, h).reshape(-1, 3)
    return global_descriptor(gray, valid), FeatureSet(np.stack([u, v], axis=1).reshape(-1, 2), bearings, desc, resp)


def match_features(a: FeatureSet, b: FeatureSet, ratio: float = 0.85) -> np.ndarray:
    """Mutual nearest neighbours by Hamming distance passing the ratio test; (m, 2) index pairs."""
    if len(a) == 0 or len(b) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    d = kernels.hamming_matrix(a.descriptors, b.descriptors).astype(np.float64)
    ab = np.argmin(d, axis=1)
    ba = np.argmin(d, axis=0)
    ia = np.arange(len(a))
    mutual = ba[ab] == ia
    if d.shape[1] >= 2:
        two = np.partition(d, 1, axis=1)[:, :2]
        passes = two[:, 0] < ratio * two[:, 1]
    else:
        passes = np.ones(len(a), dtype=bool)
    keep = mutual & passes
    return np.stack([ia[keep], ab[keep]], axis=1)


# ---------------------------------------------------------------- map


def sample_poses(bbox, n_t: int, n_r: int, seed: int = 0) -> list:
    """``n_t`` translations uniform in the bbox shrunk by 10% per side, ``n_r`` yaws each."""
    lo, hi = (np.asarray(x, dtype=np.float64) for x in bbox)
    ext = hi - lo
    if not np.all(ext > 0) or not np.all(np.isfinite(ext)):
        raise LocalizationError(f"degenerate bounding box {lo.tolist()} .. {hi.tolist()}")
    if n_t < 1 or n_r < 1:
        raise LocalizationError("n_t and n_r must be >= 1")
    rng = np.random.default_rng(seed)
    ts = rng.uniform(lo + 0.1 * ext, hi - 0.1 * ext, size=(n_t, 3))
    return [Pose(rot_z(2 * np.pi * j / n_r), t.copy()) for t in ts for j in range(n_r)]


def _yaw_shift(rot: np.ndarray, width: int) -> int | None:
    """Column shift equivalent to a pure yaw ``rot``, or None if not a whole pixel count."""
    if abs(rot[2, 2] - 1.0) > 1e-12 or np.abs(rot[:2, 2]).max() > 1e-12 or np.abs(rot[2, :2]).max() > 1e-12:
        return None
    cols = np.arctan2(rot[1, 0], rot[0, 0]) * width / (2 * np.pi)
    k = int(np.rint(cols))
    return k % width if abs(cols - k) < 1e-9 else None


def _describe_view(ref: Panorama, depth, pose: Pose, cfg: LocalizeConfig):
    sv = warp_panorama(ref, depth, pose, cfg.fill_radius)
    desc, feats = extract_features(sv.image, cfg.max_features, sv.mask)
    w = depth.width
    r = np.rint(feats.pixels[:, 1]).astype(np.int64)
    c = np.mod(np.rint(feats.pixels[:, 0]).astype(np.int64), w)
    ok = sv.mask[r, c]
    feats = feats.subset(ok)
    feats.points = pose.apply(feats.bearings * sv.depth.depth[r[ok], c[ok]][:, None])
    return sv, desc, feats


def _rolled(base_desc: GlobalDesc, base_feats: FeatureSet, gray: np.ndarray, valid: np.ndarray, shift: int,
            width: int, height: int) -> tuple[GlobalDesc, FeatureSet]:
    """Descriptors of the base view turned by ``shift`` columns (every filter wraps horizontally)."""
    if (shift * GLOBAL_COLS) % width == 0:
        k = -(shift * GLOBAL_COLS) // width
        vec = np.roll(base_desc.vector.reshape(GLOBAL_ROWS, GLOBAL_COLS, GLOBAL_BINS), k, axis=1).ravel()
        known = np.roll(base_desc.cells.reshape(GLOBAL_ROWS, GLOBAL_COLS), k, axis=1).ravel()
        desc = GlobalDesc(vec, known)
    else:
        desc = global_descriptor(np.roll(gray, -shift, axis=1), np.roll(valid, -shift, axis=1))
    u = np.mod(base_feats.pixels[:, 0] - shift, width)
    v = base_feats.pixels[:, 1]
    feats = FeatureSet(np.stack([u, v], axis=1), pixels_to_dirs(u, v, width, height).reshape(-1, 3),
                       base_feats.descriptors, base_feats.responses, base_feats.points)
    return desc, feats


def build_reference_map(ref: Panorama, predictor, cfg: LocalizeConfig | None = None, seed: int = 0,
                        poses: list | None = None, keep_views: bool = False,
                        share_yaw: bool = True) -> ReferenceMap:
    """Back-project the reference prediction and describe a pool of synthetic views.

    Each local feature is lifted along its own view ray to the range of the
    source point splatted onto its pixel, then expressed in the reference
    frame; features on empty pixels are dropped. With ``share_yaw`` the views
    at one position that differ by a whole-pixel yaw reuse a single warp.
    """
    cfg = cfg or LocalizeConfig()
    depth = predictor.predict(ref)
    cloud = backproject(depth)
    bbox = (cloud.points.min(axis=0), cloud.points.max(axis=0))
    if poses is None:
        poses = sample_poses(bbox, cfg.n_t, cfg.n_r, seed)
    h, w = depth.height, depth.width
    bases: dict = {}
    views = []
    for pose in poses:
        shift = None if keep_views or not share_yaw else _yaw_shift(pose.rotation, w)
        if shift is None:
            sv, desc, feats = _describe_view(ref, depth, pose, cfg)
            views.append(MapView(pose, desc, feats, sv if keep_views else None))
            continue
        key = tuple(pose.translation.tolist())
        if key not in bases:
            sv, desc, feats = _describe_view(ref, depth, Pose(np.eye(3), pose.translation.copy()), cfg)
            bases[key] = (desc, feats, sv.image.gray(), sv.mask)
        desc, feats = _rolled(*bases[key], shift, w, h)
        views.append(MapView(pose, desc, feats))
    return ReferenceMap(cloud, views, bbox)


# ---------------------------------------------------------------- pose solvers


def _kabsch(cam: np.ndarray, world: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """R, t minimizing |R cam + t - world|."""
    mc, mw = cam.mean(axis=0), world.mean(axis=0)
    u, _, vt = np.linalg.svd((cam - mc).T @ (world - mw))
    s = np.diag([1.0, 1.0, np.sign(np.linalg.det(vt.T @ u.T))])
    rot = vt.T @ s @ u.T
    return rot, mw - rot @ mc


def p3p(bearings: np.ndarray, points: np.ndarray) -> list:
    """Camera poses (R, t) with ``points = R @ (s * bearings) + t`` from three correspondences.

    Grunert's distance polynomial; every real root gives a candidate.
    """
    f = bearings / np.linalg.norm(bearings, axis=1, keepdims=True)
    x1, x2, x3 = points
    a2 = float(np.sum((x2 - x3) ** 2))
    b2 = float(np.sum((x1 - x3) ** 2))
    c2 = float(np.sum((x1 - x2) ** 2))
    if min(a2, b2, c2) < 1e-18:
        return []
    ca = float(f[1] @ f[2])
    cb = float(f[0] @ f[2])
    cg = float(f[0] @ f[1])
    p = (a2 - c2) / b2
    q = (a2 + c2) / b2
    coeffs = [
        (p - 1) ** 2 - 4 * c2 / b2 * ca * ca,
        4 * (p * (1 - p) * cb - (1 - q) * ca * cg + 2 * c2 / b2 * ca * ca * cb),
        2 * (p * p - 1 + 2 * p * p * cb * cb + 2 * (b2 - c2) / b2 * ca * ca
             - 4 * q * ca * cb * cg + 2 * (b2 - a2) / b2 * cg * cg),
        4 * (-p * (1 + p) * cb + 2 * a2 / b2 * cg * cg * cb - (1 - q) * ca * cg),
        (1 + p) ** 2 - 4 * a2 / b2 * cg * cg,
    ]
    if not np.all(np.isfinite(coeffs)) or abs(coeffs[0]) < 1e-14:
        return []
    out = []
    for root in np.roots(coeffs):
        if abs(root.imag) > 1e-6 * max(1.0, abs(root.real)):
            continue
        v = root.real
        den = 2 * (cg - v * ca)
        if abs(den) < 1e-12:
            continue
        u = ((-1 + p) * v * v - 2 * p * cb * v + 1 + p) / den
        s1sq = c2 / (1 + u * u - 2 * u * cg)
        if not s1sq > 0 or u <= 0 or v <= 0:
            continue
        s1 = np.sqrt(s1sq)
        cam = f * np.array([s1, u * s1, v * s1])[:, None]
        out.append(_kabsch(cam, points))
    return out


def angular_residuals(rot: np.ndarray, t: np.ndarray, bearings: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Angle between each observed bearing and the bearing predicted by the pose."""
    pred = (points - t) @ rot
    n = np.linalg.norm(pred, axis=1)
    pred = pred / np.maximum(n, 1e-12)[:, None]
    cross = np.linalg.norm(np.cross(pred, bearings), axis=1)
    return np.arctan2(cross, np.einsum("ij,ij->i", pred, bearings))


def _so3_exp(w: np.ndarray) -> np.ndarray:
    th = np.linalg.norm(w)
    k = np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]])
    if th < 1e-12:
        return np.eye(3) + k
    k = k / th
    return np.eye(3) + np.sin(th) * k + (1 - np.cos(th)) * k @ k


def refine_pose(rot: np.ndarray, t: np.ndarray, bearings: np.ndarray, points: np.ndarray,
                iters: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Newton on tangent-plane bearing residuals (numeric Jacobian, 6 parameters)."""

    def resid(r, tt):
        pred = (points - tt) @ r
        pred = pred / np.maximum(np.linalg.norm(pred, axis=1), 1e-12)[:, None]
        return (pred - bearings).ravel()

    cur = resid(rot, t)
    cost = cur @ cur
    for _ in range(iters):
        jac = np.empty((len(cur), 6))
        for j in range(6):
            d = np.zeros(6)
            d[j] = 1e-6
            rp, tp = rot @ _so3_exp(d[:3]), t + d[3:]
            rm, tm = rot @ _so3_exp(-d[:3]), t - d[3:]
            jac[:, j] = (resid(rp, tp) - resid(rm, tm)) / 2e-6
        step, *_ = np.linalg.lstsq(jac, -cur, rcond=None)
        nr, nt = rot @ _so3_exp(step[:3]), t + step[3:]
        new = resid(nr, nt)
        if new @ new >= cost:
            break
        rot, t, cur, cost = nr, nt, new, new @ new
        if np.abs(step).max() < 1e-12:
            break
    return rot, t


@dataclass
class PnPResult:
    pose: Pose | None
    inliers: np.ndarray
    status: str


def pnp_ransac(bearings: np.ndarray, points: np.ndarray, iterations: int, threshold: float,
               rng: np.random.Generator, min_inliers: int = 6) -> PnPResult:
    n = len(points)
    if n < 3:
        return PnPResult(None, np.zeros(n, dtype=bool), "too-few-matches")
    best, best_count = None, 0
    for _ in range(iterations):
        idx = rng.choice(n, 3, replace=False)
        for rot, t in p3p(bearings[idx], points[idx]):
            inl = angular_residuals(rot, t, bearings, points) <= threshold
            cnt = int(inl.sum())
            if cnt > best_count:
                best, best_count = (rot, t), cnt
        if best_count == n:
            break
    if best is None or best_count < min(min_inliers, n):
        return PnPResult(None, np.zeros(n, dtype=bool), "ransac-degenerate")
    rot, t = best
    inl = angular_residuals(rot, t, bearings, points) <= threshold
    for _ in range(3):
        rot, t = refine_pose(rot, t, bearings[inl], points[inl])
        new = angular_residuals(rot, t, bearings, points) <= threshold
        if np.array_equal(new, inl):
            break
        inl = new
    return PnPResult(Pose(rot, t), inl, "ok")


# ---------------------------------------------------------------- queries


@dataclass
class QueryResult:
    pose: Pose | None
    inliers: int
    status: str
    view: int = -1  # pool index the correspondences came from


def localize_query(query: Panorama, ref_map: ReferenceMap, cfg: LocalizeConfig | None = None,
                   rng=None) -> QueryResult:
    """Retrieve, match and solve; failures are reported in ``status``."""
    cfg = cfg or LocalizeConfig()
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    desc, feats = extract_features(query, cfg.max_features)
    if len(feats) == 0 or not ref_map.views:
        return QueryResult(None, 0, "no-matches")
    dist = retrieval_distances(desc, ref_map.descriptor_matrix(), ref_map.cell_matrix())
    ranked = np.argsort(dist, kind="stable")[:cfg.top_k]
    best_view, best_pairs = -1, np.zeros((0, 2), dtype=np.int64)
    for vi in ranked:
        pairs = match_features(feats, ref_map.views[vi].features, cfg.ratio)
        if len(pairs) > len(best_pairs):
            best_view, best_pairs = int(vi), pairs
    if len(best_pairs) == 0:
        return QueryResult(None, 0, "no-matches")
    ref_feats = ref_map.views[best_view].features
    iters, thr = cfg.ransac
    res = pnp_ransac(feats.bearings[best_pairs[:, 0]], ref_feats.points[best_pairs[:, 1]], int(iters), float(thr),
                     rng, cfg.min_inliers)
    return QueryResult(res.pose, int(res.inliers.sum()), res.status, best_view)


def rotation_angle_deg(rot_a: np.ndarray, rot_b: np.ndarray) -> float:
    m = rot_a.T @ rot_b
    s = 0.5 * np.linalg.norm([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])
    c = 0.5 * (np.trace(m) - 1.0)
    return float(np.degrees(np.arctan2(s, c)))


def pose_error(est: Pose, gt: Pose) -> tuple[float, float]:
    """Translation error (m) and rotation error (deg)."""
    return (float(np.linalg.norm(est.translation - gt.translation)),
            rotation_angle_deg(est.rotation, gt.rotation))


@dataclass
class LocalizationReport:
    t_err: np.ndarray
    r_err: np.ndarray
    status: list
    accuracy: dict = field(default_factory=dict)  # (t_max, r_max) -> fraction
    inliers: list = field(default_factory=list)

    @property
    def median_t(self) -> float:
        return float(np.median(self.t_err))

    @property
    def median_r(self) -> float:
        return float(np.median(self.r_err))


def accuracy(t_err, r_err, t_max: float, r_max: float) -> float:
    t_err, r_err = np.asarray(t_err), np.asarray(r_err)
    return float(np.mean((t_err <= t_max) & (r_err <= r_max)))


def sample_queries(scene, ref_pose: Pose, n: int, max_dist: float = 2.0, width: int = 256, height: int = 128,
                   seed: int = 0, margin: float = 0.3) -> list:
    """Panoramas rendered near the reference, with their poses in the reference frame.

    Positions are uniform in the horizontal disc of radius ``max_dist`` at the
    reference height (free space only); yaw is uniform.
    """
    from .scenegen import render_panorama  # scene generation stays optional for map users

    rng = np.random.default_rng(seed)
    ref_inv = ref_pose.inverse()
    out = []
    for _ in range(10000 * n):
        if len(out) == n:
            break
        r = max_dist * np.sqrt(rng.uniform())
        a = rng.uniform(-np.pi, np.pi)
        yaw = rng.uniform(-np.pi, np.pi)
        pos = ref_pose.translation + np.array([r * np.cos(a), r * np.sin(a), 0.0])
        if not scene.scene.is_free(pos, margin):
            continue
        world = Pose(rot_z(yaw), pos)
        pano, _ = render_panorama(scene, world, width, height)
        out.append((pano, ref_inv.compose(world)))
    if len(out) < n:
        raise LocalizationError(f"found only {len(out)} free query positions")
    return out


def evaluate_queries(ref_map: ReferenceMap, queries: list, cfg: LocalizeConfig | None = None,
                     seed: int = 0) -> LocalizationReport:
    """Localize every (panorama, gt pose) pair; failures count as infinite error."""
    cfg = cfg or LocalizeConfig()
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(len(queries))]
    t_err, r_err, status, inliers = [], [], [], []
    for (pano, gt), rng in zip(queries, rngs):
        res = localize_query(pano, ref_map, cfg, rng)
        status.append(res.status)
        inliers.append(res.inliers)
        if res.pose is None:
            t_err.append(np.inf)
            r_err.append(np.inf)
        else:
            te, re = pose_error(res.pose, gt)
            t_err.append(te)
            r_err.append(re)
    t_err, r_err = np.array(t_err), np.array(r_err)
    acc = {(float(tm), float(rm)): accuracy(t_err, r_err, tm, rm) for tm, rm in cfg.thresholds}
    return LocalizationReport(t_err, r_err, status, acc, inliers)
