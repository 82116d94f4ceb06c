"""Hot-loop kernels, compiled when available.

``BACKEND`` is ``"cython"`` when the extension imported and ``"numpy"``
otherwise. Setting ``PANOCALIB_PURE=1`` forces the numpy path.
"""
from __future__ import annotations

import os

from . import _fallback

if os.environ.get("PANOCALIB_PURE"):
    _impl = _fallback
    BACKEND = "numpy"
else:
    try:
        from . import _core as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        _impl = _fallback
        BACKEND = "numpy"

import numpy as np


def splat_zbuffer(dest: np.ndarray, depth: np.ndarray, n_dest: int) -> np.ndarray:
    return _impl.splat_zbuffer(
        np.ascontiguousarray(dest, dtype=np.int64),
        np.ascontiguousarray(depth, dtype=np.float64),
        int(n_dest),
    )


def trace_free(rows: int, cols: int, r0: int, c0: int, ends: np.ndarray) -> np.ndarray:
    ends = np.ascontiguousarray(np.asarray(ends, dtype=np.int64).reshape(-1, 2))
    return _impl.trace_free(int(rows), int(cols), int(r0), int(c0), ends)


def hamming_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a).view(np.uint64)
    b = np.ascontiguousarray(b).view(np.uint64)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]), dtype=np.int32)
    return _impl.hamming_matrix(a, b)
