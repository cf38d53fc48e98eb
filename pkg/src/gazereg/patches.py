"""Per-patch gaze distributions: the target of the KL regularizer.

A patch's mass is the sum of heatmap pixel values inside it; probabilities
divide each mass by the total.  Masses are exact (integer-valued for binary
maps), so merging patches conserves mass exactly at the mass level; the
probability vector sums to one within accumulated rounding only.
"""

from dataclasses import dataclass

import numpy as np

from . import containers
from .errors import ShapeError

FALLBACK_NONE = "none"
FALLBACK_UNIFORM = "uniform"


@dataclass(frozen=True)
class PatchGrid:
    n_h: int  # horizontal patch count
    n_v: int  # vertical patch count
    patch_w: int
    patch_h: int

    @property
    def n(self):
        return self.n_h * self.n_v

    @classmethod
    def for_image(cls, width, height, n_h, n_v):
        if width % n_h or height % n_v:
            raise ShapeError(
                f"image {width}x{height} not divisible into {n_h}x{n_v} patches"
            )
        return cls(n_h=n_h, n_v=n_v, patch_w=width // n_h, patch_h=height // n_v)


@dataclass
class GazeDistribution:
    probs: np.ndarray  # length n_h*n_v, row-major over (patch row, patch col)
    frame_id: int
    fallback: str = FALLBACK_NONE


def patch_sums(values, grid):
    """(n_v, n_h) per-patch pixel sums.  Exact for binary maps."""
    h, w = values.shape
    if h != grid.n_v * grid.patch_h or w != grid.n_h * grid.patch_w:
        raise ShapeError(
            f"heatmap {w}x{h} does not match grid "
            f"{grid.n_h}x{grid.n_v} of {grid.patch_w}x{grid.patch_h} patches"
        )
    return values.reshape(grid.n_v, grid.patch_h, grid.n_h, grid.patch_w).sum(axis=(1, 3))


def _distribution(values, grid, frame_id):
    sums = patch_sums(values, grid)
    total = sums.sum()
    if total <= 0.0:
        probs = np.full(grid.n, 1.0 / grid.n, dtype=np.float64)
        return GazeDistribution(probs=probs, frame_id=frame_id, fallback=FALLBACK_UNIFORM)
    return GazeDistribution(probs=(sums / total).ravel(), frame_id=frame_id)


def gaze_distribution(h, grid):
    """Distribution over patches from a binary heatmap (Eq.-style proportion
    of gaze per patch).  All-zero maps fall back to uniform, flagged."""
    return _distribution(h.values, grid, h.frame_id)


def distribution_from_continuous(h, grid):
    """Same contract with real-valued pixel weights."""
    return _distribution(h.values, grid, h.frame_id)


def save_distribution(path, dist):
    containers.write_heatmap(path, dist.probs[None, :], containers.KIND_DISTRIBUTION)


def load_distribution(path, frame_id=-1):
    values, code = containers.read_heatmap(path)
    if code != containers.KIND_DISTRIBUTION:
        raise ShapeError(f"{path}: not a distribution container (kind {code})")
    return GazeDistribution(probs=values.ravel(), frame_id=frame_id)
