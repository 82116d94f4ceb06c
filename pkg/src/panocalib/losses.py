"""Self-supervised calibration objectives and baseline consistency losses.

All terms are per-pixel or per-sample means so their magnitudes do not
depend on panorama resolution.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import DepthMap, EmptyCloudError, Panorama, PointCloud, Pose, backproject, rot_z
from .predictor import DepthPredictor, rotate_panorama
from .stretch import stretch_depth, stretch_image
from .synth import PerturbConfig, SynthView, sample_perturb_pose, warp_panorama


@dataclass
class LossConfig:
    delta1: float = 1.0
    delta2: float = 2.5
    sigma: float = 0.8
    normal_neighbors: int = 15
    chamfer_samples: int = 8192
    perturb: PerturbConfig = field(default_factory=PerturbConfig)
    weights: tuple = (1.0, 1.0, 1.0)
    # compare only directly splatted pixels of the warped view
    splat_only: bool = True
    # ball-query radius for normals; None means plain k nearest neighbors
    normal_radius: float | None = None
    fill_radius: float = 2.0

    def __post_init__(self) -> None:
        if not 0 < self.delta1 < self.delta2:
            raise ValueError("need 0 < delta1 < delta2")
        if not 0 < self.sigma < 1:
            raise ValueError("sigma must lie in (0, 1)")
        if self.normal_neighbors < 3:
            raise ValueError("normal_neighbors must be >= 3")

    def stretch_factors(self, avg: float) -> tuple:
        """Factors used by the stretch loss for a prediction with mean depth ``avg``."""
        if avg < self.delta1:
            return (1.0 / self.sigma, 1.0 / self.sigma**2)
        if avg > self.delta2:
            return (self.sigma, self.sigma**2)
        return ()


@dataclass
class LossReport:
    stretch: float
    chamfer: float
    normal: float
    total: float = field(init=False)

    def __post_init__(self) -> None:
        self.total = self.stretch + self.chamfer + self.normal

    def as_row(self) -> str:
        return f"{self.stretch!r},{self.chamfer!r},{self.normal!r},{self.total!r}"


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def masked_mse(a: DepthMap, b: DepthMap, extra: np.ndarray | None = None) -> float:
    both = a.valid & b.valid
    if extra is not None:
        both &= extra
    if not both.any():
        return 0.0
    diff = a.depth[both] - b.depth[both]
    return float(np.mean(diff * diff))


def stretch_target(image: Panorama, teacher: DepthPredictor, k: float) -> DepthMap:
    """Prediction on the k-stretched image, mapped back by the inverse stretch."""
    return stretch_depth(teacher.predict(stretch_image(image, k)), 1.0 / k)


def stretch_loss(predictor: DepthPredictor, image: Panorama, cfg: LossConfig, *,
                 teacher: DepthPredictor | None = None, depth: DepthMap | None = None,
                 targets: dict | None = None, trace: list | None = None,
                 gate_mean: float | None = None) -> float:
    """Scale consistency between the prediction and predictions on stretched copies.

    ``teacher`` produces the stretched-view predictions (default: the
    predictor itself). ``targets`` may hold precomputed stretch targets keyed
    by factor; factors actually evaluated are appended to ``trace``.
    ``gate_mean`` overrides the mean depth that picks the stretch factors.
    """
    d_hat = depth if depth is not None else predictor.predict(image)
    ks = cfg.stretch_factors(d_hat.mean() if gate_mean is None else gate_mean)
    teacher = teacher or predictor
    total = 0.0
    for k in ks:
        if trace is not None:
            trace.append(k)
        tgt = targets[k] if targets is not None and k in targets else stretch_target(image, teacher, k)
        total += masked_mse(d_hat, tgt)
    return total


def _knn_normals(points: np.ndarray, tree: cKDTree, query: np.ndarray, k: int,
                 radius: float | None = None):
    """PCA normals at ``query`` from neighbors in ``points`` oriented toward the origin."""
    k = min(k, len(points))
    _, idx = tree.query(query, k=k)
    idx = np.asarray(idx).reshape(len(query), k)
    nb = points[idx]
    valid = np.ones(len(query), dtype=bool)
    if radius is not None:
        d = np.linalg.norm(nb - query[:, None, :], axis=2)
        inside = d <= radius
        weights = inside.astype(np.float64)
        cnt = weights.sum(axis=1)
        valid &= cnt >= 3
        cnt = np.maximum(cnt, 1.0)
        mean = (nb * weights[..., None]).sum(axis=1) / cnt[:, None]
        c = (nb - mean[:, None, :]) * weights[..., None]
    else:
        mean = nb.mean(axis=1)
        c = nb - mean[:, None, :]
    cov = np.einsum("nki,nkj->nij", c, c)
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0]
    # rank < 2 neighborhoods (collinear or coincident points) have no plane
    valid &= evals[:, 1] > 1e-12 * np.maximum(evals[:, 2], 1e-300)
    valid &= evals[:, 2] > 0
    flip = np.einsum("ni,ni->n", normals, -query) < 0
    normals[flip] *= -1.0
    return normals, valid


def estimate_normals(cloud: PointCloud, neighbors: int = 15, radius: float | None = None) -> PointCloud:
    """Smallest-eigenvector normals of each point's k-neighborhood, facing the camera."""
    if len(cloud) < neighbors:
        raise EmptyCloudError(f"need at least {neighbors} points, got {len(cloud)}")
    tree = cKDTree(cloud.points)
    normals, valid = _knn_normals(cloud.points, tree, cloud.points, neighbors, radius)
    normals[~valid] = np.nan
    return PointCloud(cloud.points, normals, cloud.source_pixel, valid)


def _subsample(n: int, count: int, rng: np.random.Generator) -> np.ndarray:
    if n <= count:
        return np.arange(n)
    return np.sort(rng.choice(n, size=count, replace=False))


@dataclass
class _Pairs:
    moved: np.ndarray  # source samples expressed in the warped camera frame
    nearest: np.ndarray  # their nearest warped-cloud points
    normals: np.ndarray  # source normals rotated into the warped frame
    normal_valid: np.ndarray


def _warped_cloud(warped) -> PointCloud:
    """Target cloud from a SynthView, a warped-frame DepthMap or a PointCloud."""
    if isinstance(warped, PointCloud):
        if len(warped) == 0:
            raise EmptyCloudError("warped cloud is empty")
        return warped
    if isinstance(warped, SynthView):
        warped = warped.depth
    return backproject(warped)


def pair_clouds(d_hat: DepthMap, warped, pose: Pose, cfg: LossConfig, rng=None,
                with_normals: bool = True) -> _Pairs:
    rng = _as_rng(rng)
    src = backproject(d_hat)
    dst = _warped_cloud(warped)
    sel = _subsample(len(src), cfg.chamfer_samples, rng)
    x = src.points[sel]
    moved = pose.to_camera(x)
    _, nn = cKDTree(dst.points).query(moved)
    nearest = dst.points[nn]
    if with_normals and len(src) >= 3:
        n, ok = _knn_normals(src.points, cKDTree(src.points), x, cfg.normal_neighbors, cfg.normal_radius)
        n = n @ pose.rotation
    else:
        n = np.zeros_like(x)
        ok = np.zeros(len(x), dtype=bool)
    return _Pairs(moved, nearest, n, ok)


def _chamfer_from(p: _Pairs) -> float:
    r = p.moved - p.nearest
    return float(np.mean(np.einsum("ni,ni->n", r, r)))


def _normal_from(p: _Pairs) -> float:
    r = np.einsum("ni,ni->n", p.normals, p.moved - p.nearest)
    # invalid normals contribute nothing but stay in the denominator
    return float(np.sum(np.where(p.normal_valid, r * r, 0.0)) / len(r))


def chamfer_loss(d_hat: DepthMap, warped, pose: Pose, cfg: LossConfig, rng=None) -> float:
    """Mean squared distance from moved source samples to their nearest warped points."""
    return _chamfer_from(pair_clouds(d_hat, warped, pose, cfg, rng, with_normals=False))


def normal_loss(d_hat: DepthMap, warped, pose: Pose, cfg: LossConfig, rng=None) -> float:
    """Mean squared point-to-plane residual over the same samples as :func:`chamfer_loss`."""
    return _normal_from(pair_clouds(d_hat, warped, pose, cfg, rng))


def chamfer_scale_gradient(d_hat: DepthMap, warped, pose: Pose, cfg: LossConfig, rng=None) -> float:
    """Derivative of :func:`chamfer_loss` w.r.t. a log-scale on ``d_hat``, nearest neighbours held fixed.

    A source point x scaled by exp(a) moves to R^T (exp(a) x - t), whose
    derivative at a = 0 is R^T x = moved + R^T t.
    """
    p = pair_clouds(d_hat, warped, pose, cfg, rng, with_normals=False)
    r = p.moved - p.nearest
    dm = p.moved + pose.translation @ pose.rotation
    return float(np.mean(2.0 * np.einsum("ni,ni->n", r, dm)))


def chamfer_bruteforce(moved: np.ndarray, target: np.ndarray) -> float:
    d2 = np.sum((moved[:, None, :] - target[None, :, :]) ** 2, axis=2)
    return float(np.mean(d2.min(axis=1)))


def warped_prediction(predictor: DepthPredictor, view: SynthView, cfg: LossConfig) -> DepthMap:
    d = predictor.predict(view.image)
    keep = view.splat_mask if cfg.splat_only else view.mask
    return DepthMap(d.depth, d.valid & keep)


def total_loss(predictor: DepthPredictor, image: Panorama, cfg: LossConfig, rng=None, *,
               teacher: DepthPredictor | None = None, targets: dict | None = None,
               depth: DepthMap | None = None, gate_mean: float | None = None) -> LossReport:
    """One perturbation pose, one warped view, all three terms."""
    rng = _as_rng(rng)
    d_hat = depth if depth is not None else predictor.predict(image)
    s = stretch_loss(predictor, image, cfg, teacher=teacher, depth=d_hat, targets=targets, gate_mean=gate_mean)
    pose = sample_perturb_pose(cfg.perturb, rng)
    view = warp_panorama(image, d_hat, pose, cfg.fill_radius)
    d_warp = warped_prediction(predictor, view, cfg)
    pairs = pair_clouds(d_hat, d_warp, pose, cfg, rng)
    ws, wc, wn = cfg.weights
    return LossReport(ws * s, wc * _chamfer_from(pairs), wn * _normal_from(pairs))


BASELINES = ("flip", "mask", "photometric", "pseudo_label")


def _flip(image: Panorama) -> Panorama:
    truth = None
    if image.truth is not None:
        truth = DepthMap(image.truth.depth[:, ::-1], image.truth.valid[:, ::-1])
    return Panorama(image.rgb[:, ::-1].copy(), truth)


def _roll(image: Panorama, cols: int) -> Panorama:
    truth = None
    if image.truth is not None:
        truth = DepthMap(np.roll(image.truth.depth, cols, axis=1), np.roll(image.truth.valid, cols, axis=1))
    return Panorama(np.roll(image.rgb, cols, axis=1), truth)


def patch_mask(height: int, width: int, rng, ratio: float = 0.1, n_h: int = 4, n_w: int = 8) -> np.ndarray:
    """Keep-mask over an ``n_h x n_w`` patch grid with ``ratio`` of the patches dropped."""
    rng = _as_rng(rng)
    n = n_h * n_w
    drop = rng.choice(n, size=int(round(ratio * n)), replace=False)
    keep = np.ones(n, dtype=bool)
    keep[drop] = False
    rows = np.minimum(np.arange(height) * n_h // height, n_h - 1)
    cols = np.minimum(np.arange(width) * n_w // width, n_w - 1)
    return keep.reshape(n_h, n_w)[rows[:, None], cols[None, :]]


def baseline_loss(kind: str, predictor: DepthPredictor, image: Panorama, cfg: LossConfig,
                  rng=None, *, mask_ratio: float = 0.1, k_rot: int = 4) -> float:
    rng = _as_rng(rng)
    if kind == "flip":
        a = predictor.predict(_flip(image))
        b = predictor.predict(image)
        return masked_mse(a, DepthMap(b.depth[:, ::-1], b.valid[:, ::-1]))
    if kind == "mask":
        keep = patch_mask(image.height, image.width, rng, mask_ratio)
        if keep.all():
            return 0.0
        masked = Panorama(image.rgb * keep[..., None], image.truth)
        # the member-wise mask zeroes the dropped region on both sides
        return masked_mse(predictor.predict(image), predictor.predict(masked), keep)
    if kind == "photometric":
        d_hat = predictor.predict(image)
        pose = sample_perturb_pose(cfg.perturb, rng)
        view = warp_panorama(image, d_hat, pose, cfg.fill_radius)
        d_warp = predictor.predict(view.image)
        d_warp = DepthMap(d_warp.depth, d_warp.valid & view.mask)
        back = warp_panorama(view.image, d_warp, pose.inverse(), cfg.fill_radius)
        m = back.mask
        if not m.any():
            return 0.0
        diff = image.rgb[m] - back.image.rgb[m]
        return float(np.mean(diff * diff))
    if kind == "pseudo_label":
        base = predictor.predict(image)
        acc = np.zeros_like(base.depth)
        cnt = np.zeros(base.depth.shape)
        for j in range(1, k_rot + 1):
            if image.width % k_rot == 0:
                cols = image.width * j // k_rot
                pred = predictor.predict(_roll(image, cols))
                d, v = np.roll(pred.depth, -cols, axis=1), np.roll(pred.valid, -cols, axis=1)
            else:
                ang = 2 * np.pi * j / k_rot
                pred = predictor.predict(rotate_panorama(image, rot_z(ang)))
                back = rotate_panorama(Panorama(np.zeros(image.rgb.shape), pred), rot_z(-ang)).truth
                d, v = back.depth, back.valid
            acc += np.where(v, d, 0.0)
            cnt += v
        pseudo = DepthMap(np.where(cnt > 0, acc / np.maximum(cnt, 1), np.nan), cnt > 0)
        return masked_mse(base, pseudo)
    raise ValueError(f"unknown baseline loss {kind!r}")
