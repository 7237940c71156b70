"""Kernel backend selection.

The compiled extension is preferred; the numpy fallback is used when it is not
built or when ``GEOFCN_PURE_PYTHON=1`` is set in the environment.
"""

import os

from . import _kernels_py

BACKEND = "python"

if os.environ.get("GEOFCN_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
else:
    _impl = _kernels_py

im2col = _impl.im2col
col2im = _impl.col2im
median3x3 = _impl.median3x3
confusion_counts = _impl.confusion_counts

__all__ = ["BACKEND", "col2im", "confusion_counts", "im2col", "median3x3"]
