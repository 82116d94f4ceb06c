"""Novel-view panoramas from a single RGB-D panorama by forward splatting.

``pose`` is the new camera's pose in the source camera frame, so a source
point ``p`` appears at ``p' = R.T @ (p - t)`` in the new view.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import kernels
from .geometry import DepthMap, EmptyCloudError, Panorama, Pose, backproject, dirs_to_pixels, rot_z


@dataclass
class PerturbConfig:
    max_translation: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.max_translation < 0:
            raise ValueError("max_translation must be >= 0")


@dataclass
class SynthView:
    image: Panorama
    depth: DepthMap
    mask: np.ndarray
    source_index: np.ndarray  # flat source pixel index per destination pixel, -1 where empty
    fill_distance: np.ndarray  # 0 for direct splats, pixel distance for hole-filled pixels

    @property
    def splat_mask(self) -> np.ndarray:
        """Pixels that received a splat directly (no hole filling)."""
        return self.mask & (self.fill_distance == 0)


def sample_perturb_pose(cfg: PerturbConfig, rng: np.random.Generator) -> Pose:
    """Random yaw in [-pi, pi) and translation uniform in the cube of half-width ``max_translation``."""
    yaw = rng.uniform(-np.pi, np.pi)
    t = rng.uniform(-cfg.max_translation, cfg.max_translation, size=3)
    if cfg.max_translation == 0:
        t = np.zeros(3)
    return Pose(rot_z(yaw), t)


def _fill_holes(hit: np.ndarray, radius: float):
    """Nearest-hit indices for every pixel, with horizontal wrap-around."""
    h, w = hit.shape
    pad = int(np.ceil(radius)) + 1
    padded = np.concatenate([hit[:, -pad:], hit, hit[:, :pad]], axis=1)
    dist, (ri, ci) = ndimage.distance_transform_edt(~padded, return_indices=True)
    dist = dist[:, pad:pad + w]
    ri = ri[:, pad:pad + w]
    ci = np.mod(ci[:, pad:pad + w] - pad, w)
    return dist, ri, ci


def warp_panorama(image: Panorama, depth: DepthMap, pose: Pose, fill_radius: float = 2.0) -> SynthView:
    if image.rgb.shape[:2] != depth.depth.shape:
        raise ValueError("image and depth dimensions differ")
    h, w = depth.height, depth.width
    cloud = backproject(depth)
    pts = pose.to_camera(cloud.points)
    r = np.linalg.norm(pts, axis=1)
    keep = r > 1e-9
    if not keep.any():
        raise EmptyCloudError("every source point coincides with the new camera center")
    u, v = dirs_to_pixels(np.where(keep[:, None], pts, 1.0), w, h)
    ui = np.mod(np.rint(u).astype(np.int64), w)
    vi = np.clip(np.rint(v).astype(np.int64), 0, h - 1)
    dest = np.where(keep, vi * w + ui, -1)
    winner = kernels.splat_zbuffer(dest, r, h * w).reshape(h, w)

    hit = winner >= 0
    fill_distance = np.zeros((h, w))
    src_point = np.where(hit, winner, -1)
    if fill_radius > 0 and hit.any() and not hit.all():
        dist, ri, ci = _fill_holes(hit, fill_radius)
        fillable = (~hit) & (dist <= fill_radius)
        src_point = np.where(fillable, winner[ri, ci], src_point)
        fill_distance = np.where(fillable, dist, 0.0)
    mask = src_point >= 0

    sp = cloud.source_pixel
    flat_src = np.full((h, w), -1, dtype=np.int64)
    flat_src[mask] = sp[src_point[mask], 1] * w + sp[src_point[mask], 0]

    out_depth = np.full((h, w), np.nan)
    out_depth[mask] = r[src_point[mask]]
    rgb = np.zeros((h, w, 3))
    rgb.reshape(-1, 3)[mask.ravel()] = image.rgb.reshape(-1, 3)[flat_src[mask]]

    truth = None
    if image.truth is not None:
        # the depicted geometry keeps each source pixel's relative depth error
        ratio = (image.truth.filled(np.nan) / depth.filled(np.nan)).ravel()
        tdepth = np.full((h, w), np.nan)
        tdepth[mask] = out_depth[mask] * ratio[flat_src[mask]]
        truth = DepthMap(tdepth, mask)
    return SynthView(Panorama(rgb, truth), DepthMap(out_depth, mask), mask, flat_src, fill_distance)
