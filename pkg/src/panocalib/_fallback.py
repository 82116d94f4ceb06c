"""Pure numpy versions of the compiled kernels in ``_core.pyx``."""
from __future__ import annotations

import numpy as np


def splat_zbuffer(dest: np.ndarray, depth: np.ndarray, n_dest: int) -> np.ndarray:
    """Index of the nearest source sample landing on each destination cell (-1 if none)."""
    winner = np.full(n_dest, -1, dtype=np.int64)
    ok = (dest >= 0) & (dest < n_dest)
    src = np.nonzero(ok)[0]
    if src.size == 0:
        return winner
    # sort by cell, then depth, then source index; first entry per cell wins
    order = np.lexsort((src, depth[src], dest[src]))
    cells = dest[src][order]
    first = np.ones(cells.size, dtype=bool)
    first[1:] = cells[1:] != cells[:-1]
    winner[cells[first]] = src[order][first]
    return winner


def trace_free(rows: int, cols: int, r0: int, c0: int, ends: np.ndarray) -> np.ndarray:
    """Cells crossed by Bresenham lines from (r0, c0) to each end cell, end excluded."""
    free = np.zeros((rows, cols), dtype=bool)
    for r1, c1 in np.asarray(ends, dtype=np.int64):
        r, c = r0, c0
        dr, dc = abs(r1 - r0), abs(c1 - c0)
        sr = 1 if r0 < r1 else -1
        sc = 1 if c0 < c1 else -1
        err = dc - dr
        while not (r == r1 and c == c1):
            if 0 <= r < rows and 0 <= c < cols:
                free[r, c] = True
            e2 = 2 * err
            if e2 > -dr:
                err -= dr
                c += sc
            if e2 < dc:
                err += dc
                r += sr
    return free


_POPCOUNT8 = np.array([bin(i).count("1") for i in range(256)], dtype=np.int32)


def hamming_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise Hamming distances between packed uint64 bit strings."""
    a8 = np.ascontiguousarray(a).view(np.uint8)
    b8 = np.ascontiguousarray(b).view(np.uint8)
    out = np.zeros((a8.shape[0], b8.shape[0]), dtype=np.int32)
    for j in range(a8.shape[1]):
        out += _POPCOUNT8[np.bitwise_xor.outer(a8[:, j], b8[:, j])]
    return out
