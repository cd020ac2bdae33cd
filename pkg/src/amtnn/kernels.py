"""Kernel backend selection.

The compiled extension is used when it imports; ``AMTNN_PURE_PYTHON=1`` forces
the pure-Python fallback.
"""
import os

from . import _kernels_py

if os.environ.get("AMTNN_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl
        BACKEND = "compiled"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

project_simplex = _impl.project_simplex
pgd_row = _impl.pgd_row

python_impl = _kernels_py


def compiled_impl():
    """The compiled module, or None when the extension is unavailable."""
    try:
        from . import _kernels
    except ImportError:
        return None
    return _kernels
