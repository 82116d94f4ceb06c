# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops. Signatures mirror ``panocalib._fallback``."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def splat_zbuffer(const long long[::1] dest, const double[::1] depth, Py_ssize_t n_dest):
    cdef Py_ssize_t i, d, n = dest.shape[0]
    cdef long long[::1] winner = np.full(n_dest, -1, dtype=np.int64)
    cdef double[::1] best = np.full(n_dest, np.inf)
    for i in range(n):
        d = dest[i]
        if d < 0 or d >= n_dest:
            continue
        # strict < keeps the lowest source index on exact ties
        if depth[i] < best[d]:
            best[d] = depth[i]
            winner[d] = i
    return np.asarray(winner)


def trace_free(Py_ssize_t rows, Py_ssize_t cols, Py_ssize_t r0, Py_ssize_t c0,
               const long long[:, ::1] ends):
    cdef cnp.uint8_t[:, ::1] free = np.zeros((rows, cols), dtype=np.uint8)
    cdef Py_ssize_t k, r, c, r1, c1, dr, dc, sr, sc, err, e2
    for k in range(ends.shape[0]):
        r1 = ends[k, 0]
        c1 = ends[k, 1]
        r = r0
        c = c0
        dr = r1 - r0 if r1 >= r0 else r0 - r1
        dc = c1 - c0 if c1 >= c0 else c0 - c1
        sr = 1 if r0 < r1 else -1
        sc = 1 if c0 < c1 else -1
        err = dc - dr
        while not (r == r1 and c == c1):
            if 0 <= r < rows and 0 <= c < cols:
                free[r, c] = 1
            e2 = 2 * err
            if e2 > -dr:
                err -= dr
                c += sc
            if e2 < dc:
                err += dc
                r += sr
    return np.asarray(free).astype(bool)


cdef extern from *:
    int __builtin_popcountll(unsigned long long) nogil


def hamming_matrix(const cnp.uint64_t[:, ::1] a, const cnp.uint64_t[:, ::1] b):
    cdef Py_ssize_t i, j, w, n = a.shape[0], m = b.shape[0], nw = a.shape[1]
    cdef int acc
    cdef cnp.int32_t[:, ::1] out = np.empty((n, m), dtype=np.int32)
    with nogil:
        for i in range(n):
            for j in range(m):
                acc = 0
                for w in range(nw):
                    acc += __builtin_popcountll(a[i, w] ^ b[j, w])
                out[i, j] = acc
    return np.asarray(out)
