"""Backend dispatch for the numeric hot kernels.

Two interchangeable implementations exist: numba-compiled loops
(:mod:`csgnet.kernels.jit`) and a pure-numpy im2col path
(:mod:`csgnet.kernels.reference`).  The active one is chosen at import time
from the ``CSGNET_BACKEND`` environment variable (``numba`` or ``numpy``);
the default is numba when it imports cleanly.  ``benchmarks/bench_kernels.py``
compares the two.
"""

import os

from . import reference

_BACKENDS = {"numpy": reference}
_default = "numpy"
try:
    from . import jit

    _BACKENDS["numba"] = jit
    _default = "numba"
except ImportError:  # pragma: no cover - numba is a declared dependency
    pass

_requested = os.environ.get("CSGNET_BACKEND", "").strip().lower() or _default
if _requested not in _BACKENDS:
    raise RuntimeError(
        f"CSGNET_BACKEND={_requested!r} is not available; "
        f"choose one of {sorted(_BACKENDS)}"
    )
_active = _requested


def active_backend():
    """Name of the backend currently in use ('numba' or 'numpy')."""
    return _active


def available_backends():
    return sorted(_BACKENDS)


def set_backend(name):
    """Switch backends at runtime (used by tests and benchmarks)."""
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; choose from {sorted(_BACKENDS)}")
    _active = name


def conv2d_forward(x, w, b, return_ctx=False):
    return _BACKENDS[_active].conv2d_forward(x, w, b, return_ctx)


def conv2d_backward(x, w, dy, ctx=None, need_dx=True):
    return _BACKENDS[_active].conv2d_backward(x, w, dy, ctx, need_dx)


def maxpool2_forward(x):
    return _BACKENDS[_active].maxpool2_forward(x)


def maxpool2_backward(dy, idx, h, w):
    return _BACKENDS[_active].maxpool2_backward(dy, idx, h, w)
