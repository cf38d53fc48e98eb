"""Kernel backend selection.

The compiled Cython module is preferred; the numpy fallback is used when the
extension is missing or when ``GAZEREG_PURE_PYTHON`` is set to a non-empty
value.  ``BACKEND`` records which one is active.
"""

import os

from . import py_kernels

if os.environ.get("GAZEREG_PURE_PYTHON"):
    _impl = py_kernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl

        BACKEND = "compiled"
    except ImportError:
        _impl = py_kernels
        BACKEND = "python"

gaussian_splat_accum = _impl.gaussian_splat_accum
block_match_sad = _impl.block_match_sad

__all__ = ["BACKEND", "gaussian_splat_accum", "block_match_sad", "py_kernels"]
