"""Kernel backend selection.

The compiled extension is used when it imports; otherwise, or when
``FEDLEAK_PURE_PYTHON`` is set to anything but ``""``/``"0"``, the numpy
implementation is used.
"""
import os

from . import _pykernels

_force_py = os.environ.get("FEDLEAK_PURE_PYTHON", "") not in ("", "0")

try:
    if _force_py:
        raise ImportError("pure-python kernels requested")
    from . import _ckernels as _impl

    BACKEND = "cython"
except ImportError:
    _impl = _pykernels
    BACKEND = "numpy"


def backend_module(name=None):
    """Kernel module for ``name`` ("cython" or "numpy"), or the active one."""
    if name is None:
        return _impl
    if name == "numpy":
        return _pykernels
    if name == "cython":
        from . import _ckernels

        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")


conv3x3_pool_forward = _impl.conv3x3_pool_forward
conv3x3_pool_backward = _impl.conv3x3_pool_backward
