"""Kernel backend selection.

The compiled extension is used when it imports; ``STN_PURE_PYTHON=1`` forces
the NumPy fallback. ``set_backend`` switches at runtime (benchmarks, tests).
"""
import os

from . import _fallback

try:
    from . import _kernels
except ImportError:  # extension not built
    _kernels = None

_BACKENDS = {"python": _fallback}
if _kernels is not None:
    _BACKENDS["cython"] = _kernels

if _kernels is not None and os.environ.get("STN_PURE_PYTHON", "") in ("", "0"):
    impl = _kernels
    name = "cython"
else:
    impl = _fallback
    name = "python"


def available():
    return sorted(_BACKENDS)


def set_backend(backend):
    """Select ``"cython"`` or ``"python"``; returns the previous name."""
    global impl, name
    if backend not in _BACKENDS:
        raise ValueError(f"backend {backend!r} unavailable; have {available()}")
    previous = name
    impl, name = _BACKENDS[backend], backend
    return previous
