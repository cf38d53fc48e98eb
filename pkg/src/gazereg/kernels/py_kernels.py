"""Pure-numpy implementations of the hot kernels.

Same contracts as the compiled module `_ckernels`; selected at import time
by :mod:`gazereg.kernels` when the extension is unavailable or when
``GAZEREG_PURE_PYTHON`` is set.
"""

import numpy as np


def gaussian_splat_accum(xs, ys, width, height, sigma):
    """Sum of unit-amplitude isotropic Gaussians centred at (xs[i], ys[i]).

    Returns a (height, width) float64 grid.  Accumulation is sample-major so
    both backends add contributions to each pixel in the same order.
    """
    out = np.zeros((height, width), dtype=np.float64)
    if len(xs) == 0:
        return out
    col = np.arange(width, dtype=np.float64)
    row = np.arange(height, dtype=np.float64)
    inv = 1.0 / (2.0 * sigma * sigma)
    for x, y in zip(xs, ys):
        dx2 = (col - x) ** 2
        dy2 = (row - y) ** 2
        out += np.exp(-(dy2[:, None] + dx2[None, :]) * inv)
    return out


def block_match_sad(src, dst, block, search):
    """Exhaustive SAD block matching.

    For every ``block``-sized tile of ``src`` (edge tiles may be smaller),
    finds the integer displacement (dy, dx) within ``[-search, search]^2``
    that minimises the sum of absolute differences against ``dst``.
    Candidates whose window leaves the image are skipped; (0, 0) is always
    valid.  Ties resolve to the smallest squared magnitude, then to the
    lexicographically smallest (dy, dx).

    Returns (fy, fx): two float64 arrays of shape (n_block_rows, n_block_cols).
    """
    h, w = src.shape
    y_starts = np.arange(0, h, block)
    x_starts = np.arange(0, w, block)
    y_ends = np.minimum(y_starts + block, h)
    x_ends = np.minimum(x_starts + block, w)
    nby, nbx = len(y_starts), len(x_starts)

    best_sad = np.full((nby, nbx), np.inf)
    best_mag = np.full((nby, nbx), np.inf)
    best_dy = np.zeros((nby, nbx))
    best_dx = np.zeros((nby, nbx))

    shifted = np.empty_like(src)
    for dy in range(-search, search + 1):
        ok_y = (y_starts + dy >= 0) & (y_ends + dy <= h)
        for dx in range(-search, search + 1):
            ok_x = (x_starts + dx >= 0) & (x_ends + dx <= w)
            valid = ok_y[:, None] & ok_x[None, :]
            if not valid.any():
                continue
            shifted.fill(0.0)
            ys0, ys1 = max(0, -dy), min(h, h - dy)
            xs0, xs1 = max(0, -dx), min(w, w - dx)
            shifted[ys0:ys1, xs0:xs1] = dst[ys0 + dy : ys1 + dy, xs0 + dx : xs1 + dx]
            diff = np.abs(src - shifted)
            sad = np.add.reduceat(np.add.reduceat(diff, y_starts, axis=0), x_starts, axis=1)
            sad = np.where(valid, sad, np.inf)

            mag = float(dy * dy + dx * dx)
            take = (sad < best_sad) | ((sad == best_sad) & (mag < best_mag))
            # equal sad and equal magnitude: earlier (dy, dx) in loop order wins,
            # which is exactly lexicographic order.
            best_mag = np.where(take, mag, best_mag)
            best_dy = np.where(take, float(dy), best_dy)
            best_dx = np.where(take, float(dx), best_dx)
            best_sad = np.where(take, sad, best_sad)
    return best_dy, best_dx
