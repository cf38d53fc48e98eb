"""Gaussian gaze heatmaps, binarization, and gaze-overlaid images.

Heatmap grids are indexed ``values[y, x]`` (row-major); gaze coordinates are
(x, y) pixels.  Continuous maps are sums of unit-amplitude Gaussians divided
by the number of contributing samples, so singular and aggregated windows
share the same peak scale.
"""

from dataclasses import dataclass

import numpy as np

from . import containers, kernels
from .errors import ParameterError, ShapeError

CONTINUOUS = "continuous"
BINARY = "binary"

# Blend target for overlays: full red, other channels zero.  Fixed so that
# overlay output is bit-reproducible.
HIGHLIGHT_CHANNEL = 0


@dataclass
class Heatmap:
    values: np.ndarray  # (height, width) float64
    frame_id: int
    kind: str
    excluded_samples: int = 0  # out-of-bounds gaze points skipped at splat time

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]


@dataclass
class GazeOverlaidImage:
    pixels: np.ndarray  # (height, width, channels) float64 in [0, 1]
    frame_id: int


def gaussian_splat(window, width, height, sigma_px):
    """Continuous heatmap from an alignment window.

    Out-of-bounds samples are skipped and counted; an empty window yields an
    all-zero map.
    """
    if sigma_px <= 0:
        raise ParameterError(f"sigma_px must be > 0, got {sigma_px}")
    xs, ys = [], []
    excluded = 0
    for s in window.selected:
        if 0.0 <= s.x < width and 0.0 <= s.y < height:
            xs.append(float(s.x))
            ys.append(float(s.y))
        else:
            excluded += 1
    if not xs:
        values = np.zeros((height, width), dtype=np.float64)
    else:
        values = kernels.gaussian_splat_accum(
            np.asarray(xs), np.asarray(ys), width, height, float(sigma_px)
        )
        values /= len(xs)
    return Heatmap(values=values, frame_id=window.frame_id, kind=CONTINUOUS, excluded_samples=excluded)


def binarize(h, tau):
    """Threshold a continuous map at ``tau`` times its maximum.

    All-zero input stays all-zero.
    """
    if h.kind != CONTINUOUS:
        raise ParameterError("binarize expects a continuous heatmap")
    if not 0.0 < tau <= 1.0:
        raise ParameterError(f"tau must be in (0, 1], got {tau}")
    peak = h.values.max()
    if peak <= 0.0:
        values = np.zeros_like(h.values)
    else:
        values = (h.values >= tau * peak).astype(np.float64)
    return Heatmap(values=values, frame_id=h.frame_id, kind=BINARY,
                   excluded_samples=h.excluded_samples)


def overlay(base, h, alpha):
    """Alpha-blend a heatmap onto an image.

    out = (1 - alpha*hn)*base + alpha*hn*highlight, with hn the heatmap
    normalised by its maximum (zero map blends nothing).  The highlight is
    channel 0 at full intensity.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"alpha must be in [0, 1], got {alpha}")
    base = np.asarray(base, dtype=np.float64)
    if base.ndim != 3:
        raise ShapeError(f"base image must be (h, w, c), got shape {base.shape}")
    if base.shape[:2] != h.values.shape:
        raise ShapeError(
            f"image {base.shape[:2]} and heatmap {h.values.shape} dimensions differ"
        )
    peak = h.values.max()
    hn = h.values / peak if peak > 0 else np.zeros_like(h.values)
    highlight = np.zeros(base.shape[2], dtype=np.float64)
    highlight[HIGHLIGHT_CHANNEL] = 1.0
    weight = (alpha * hn)[:, :, None]
    pixels = (1.0 - weight) * base + weight * highlight
    return GazeOverlaidImage(pixels=pixels, frame_id=h.frame_id)


_KIND_CODE = {CONTINUOUS: containers.KIND_CONTINUOUS, BINARY: containers.KIND_BINARY}
_CODE_KIND = {v: k for k, v in _KIND_CODE.items()}


def save_heatmap(path, h):
    containers.write_heatmap(path, h.values, _KIND_CODE[h.kind])


def load_heatmap(path, frame_id=-1):
    values, code = containers.read_heatmap(path)
    if code not in _CODE_KIND:
        raise ParameterError(f"{path}: kind code {code} is not a heatmap")
    return Heatmap(values=values, frame_id=frame_id, kind=_CODE_KIND[code])
