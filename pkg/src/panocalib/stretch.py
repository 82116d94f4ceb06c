"""Panorama stretching: resampling that mimics scaling the scene by k in x and y.

A scene point at colatitude ``psi_s`` moves to ``psi_d`` with
``tan(psi_d) = k * tan(psi_s)`` when x and y are scaled about the camera. The
inverse row map is evaluated with ``atan2(sin psi_d, k cos psi_d)``, which is
continuous across the equator.
"""
from __future__ import annotations

import numpy as np

from .geometry import DepthMap, GeometryError, Panorama, colatitude


def _check_k(k: float) -> float:
    k = float(k)
    if not np.isfinite(k) or k <= 0:
        raise GeometryError(f"stretch factor must be positive and finite, got {k}")
    return k


def kappa_colat(psi, k: float):
    """Depth gain for a ray at colatitude ``psi`` when the scene is stretched by ``k``."""
    s, c = np.sin(psi), np.cos(psi)
    return np.sqrt(k * k * s * s + c * c)


def kappa(v: float, k: float, height: int) -> float:
    """Depth correction factor at (continuous, pixel-centered) row ``v``."""
    k = _check_k(k)
    if not (-0.5 <= v <= height - 0.5):
        raise GeometryError(f"row {v} outside [-0.5, {height - 0.5}]")
    return float(kappa_colat(colatitude(v, height), k))


def source_rows(height: int, k: float) -> np.ndarray:
    """Continuous source row feeding each destination row under stretch ``k``."""
    psi_d = colatitude(np.arange(height), height)
    psi_s = np.arctan2(np.sin(psi_d), k * np.cos(psi_d))
    rows = psi_s * height / np.pi - 0.5
    near = np.round(rows)
    # snap float noise so k = 1 is an exact identity
    return np.where(np.abs(rows - near) < 1e-9, near, rows)


def resample_rows(values: np.ndarray, valid: np.ndarray, rows: np.ndarray):
    """Vertical linear interpolation with invalid samples dropped from the weights.

    Returns ``(out, out_valid)``; a destination pixel is invalid only when
    both contributing samples are invalid.
    """
    h = values.shape[0]
    rows = np.clip(rows, 0.0, h - 1.0)
    r0 = np.floor(rows).astype(np.int64)
    r1 = np.minimum(r0 + 1, h - 1)
    w = (rows - r0)[:, None]
    w0 = (1.0 - w) * valid[r0]
    w1 = w * valid[r1]
    total = w0 + w1
    ok = total > 0
    safe = np.where(ok, total, 1.0)
    v0 = np.where(valid[r0][..., None] if values.ndim == 3 else valid[r0], values[r0], 0.0)
    v1 = np.where(valid[r1][..., None] if values.ndim == 3 else valid[r1], values[r1], 0.0)
    if values.ndim == 3:
        out = (w0[..., None] * v0 + w1[..., None] * v1) / safe[..., None]
    else:
        out = (w0 * v0 + w1 * v1) / safe
    return out, ok


def stretch_image(pano: Panorama, k: float) -> Panorama:
    k = _check_k(k)
    truth = stretch_depth(pano.truth, k) if pano.truth is not None else None
    if k == 1.0:
        return Panorama(pano.rgb.copy(), truth)
    rows = source_rows(pano.height, k)
    valid = np.ones(pano.rgb.shape[:2], dtype=bool)
    rgb, _ = resample_rows(pano.rgb, valid, rows)
    return Panorama(np.clip(rgb, 0.0, 1.0), truth)


def stretch_depth(depth: DepthMap, k: float) -> DepthMap:
    """Resample rows like :func:`stretch_image` and rescale by the depth gain.

    The gain is taken at the source colatitude, where
    ``|(k x, k y, z)| = kappa * |(x, y, z)|`` holds for the sampled ray.
    """
    k = _check_k(k)
    if k == 1.0:
        return DepthMap(depth.depth.copy(), depth.valid.copy())
    rows = source_rows(depth.height, k)
    out, ok = resample_rows(depth.filled(0.0), depth.valid, rows)
    psi_s = colatitude(rows, depth.height)
    out = out * kappa_colat(psi_s, k)[:, None]
    return DepthMap(out, ok)
