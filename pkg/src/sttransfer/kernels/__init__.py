"""Hot loops behind the tensor engine and the edge detector.

The compiled extension (``_native``) is used when it was built; otherwise
the numpy versions in ``_fallback`` are. Set ``STTRANSFER_KERNELS=python``
to force the fallback. ``BACKEND`` names whichever was selected.
"""
from __future__ import annotations

import importlib
import os

from . import _fallback

_forced = os.environ.get("STTRANSFER_KERNELS", "").strip().lower()

_native = None
if _forced != "python":
    try:
        _native = importlib.import_module(f"{__name__}._native")
    except ImportError:
        if _forced in ("cython", "native"):
            raise

if _native is not None:
    BACKEND = "cython"
    _impl = _native
else:
    BACKEND = "python"
    _impl = _fallback

im2col = _impl.im2col
col2im = _impl.col2im
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward
canny_nms = _impl.canny_nms
hysteresis = _impl.hysteresis


def available_backends() -> dict:
    """Map backend name to kernel module, for benchmarks and parity tests."""
    found = {"python": _fallback}
    if _native is not None:
        found["cython"] = _native
    return found


__all__ = [
    "BACKEND",
    "available_backends",
    "im2col",
    "col2im",
    "maxpool_forward",
    "maxpool_backward",
    "canny_nms",
    "hysteresis",
]
