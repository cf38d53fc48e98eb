"""gazereg: gaze-regularized attention at desk scale.

Gaze ingestion and alignment, Gaussian heatmaps, flow-consistency occlusion
checking, per-patch gaze distributions, a fully hand-differentiated
gaze-regularized attention model, a pseudo-gaze predictor, and a synthetic
planted-signal benchmark with a CLI tying it together.
"""

from .config import RunConfig
from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["RunConfig", "KERNEL_BACKEND", "__version__"]
