# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: Gaussian splatting and SAD block matching.

Mirrors gazereg.kernels.py_kernels; keep the two in sync.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, INFINITY

cnp.import_array()


def gaussian_splat_accum(xs, ys, int width, int height, double sigma):
    cdef double[::1] xv = np.ascontiguousarray(xs, dtype=np.float64)
    cdef double[::1] yv = np.ascontiguousarray(ys, dtype=np.float64)
    out_arr = np.zeros((height, width), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t n = xv.shape[0]
    cdef Py_ssize_t k, r, c
    cdef double inv = 1.0 / (2.0 * sigma * sigma)
    cdef double dx, dy
    for k in range(n):
        for r in range(height):
            dy = r - yv[k]
            for c in range(width):
                dx = c - xv[k]
                out[r, c] += exp(-(dy * dy + dx * dx) * inv)
    return out_arr


def block_match_sad(src, dst, int block, int search):
    cdef double[:, ::1] s = np.ascontiguousarray(src, dtype=np.float64)
    cdef double[:, ::1] d = np.ascontiguousarray(dst, dtype=np.float64)
    cdef Py_ssize_t h = s.shape[0]
    cdef Py_ssize_t w = s.shape[1]
    cdef Py_ssize_t nby = (h + block - 1) // block
    cdef Py_ssize_t nbx = (w + block - 1) // block

    fy_arr = np.zeros((nby, nbx), dtype=np.float64)
    fx_arr = np.zeros((nby, nbx), dtype=np.float64)
    cdef double[:, ::1] fy = fy_arr
    cdef double[:, ::1] fx = fx_arr

    cdef Py_ssize_t bi, bj, y0, y1, x0, x1, r, c
    cdef int dy, dx
    cdef double sad, best_sad, best_mag, mag, v
    cdef int best_dy, best_dx

    for bi in range(nby):
        y0 = bi * block
        y1 = y0 + block
        if y1 > h:
            y1 = h
        for bj in range(nbx):
            x0 = bj * block
            x1 = x0 + block
            if x1 > w:
                x1 = w
            best_sad = INFINITY
            best_mag = INFINITY
            best_dy = 0
            best_dx = 0
            for dy in range(-search, search + 1):
                if y0 + dy < 0 or y1 + dy > h:
                    continue
                for dx in range(-search, search + 1):
                    if x0 + dx < 0 or x1 + dx > w:
                        continue
                    sad = 0.0
                    for r in range(y0, y1):
                        for c in range(x0, x1):
                            v = s[r, c] - d[r + dy, c + dx]
                            if v < 0:
                                v = -v
                            sad += v
                    mag = <double>(dy * dy + dx * dx)
                    if sad < best_sad or (sad == best_sad and mag < best_mag):
                        best_sad = sad
                        best_mag = mag
                        best_dy = dy
                        best_dx = dx
            fy[bi, bj] = best_dy
            fx[bi, bj] = best_dx
    return fy_arr, fx_arr
