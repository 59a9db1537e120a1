"""Backend selection for the convolution gather/scatter kernels.

The compiled extension is used when it imports; set ``FLOWSHIFT_PURE_PYTHON=1``
to force the numpy fallback. ``BACKEND`` names the active implementation.
"""
import os

from . import _kernels_py

if os.environ.get("FLOWSHIFT_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py
        BACKEND = "python"

im2col = _impl.im2col
col2im = _impl.col2im

__all__ = ["BACKEND", "im2col", "col2im", "_kernels_py"]
