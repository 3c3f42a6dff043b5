"""Kernel backend selection.

Two interchangeable implementations of the hot 3D kernels exist: numba
``@njit`` loops (fast) and pure numpy (always available).  The active
one is chosen once from the ``QSMKIT_BACKEND`` environment variable:

    QSMKIT_BACKEND=numba   force numba, error if unavailable
    QSMKIT_BACKEND=numpy   force the pure-numpy fallback
    unset                  numba when importable, else numpy

Both produce matching results within float rounding (see
benchmarks/bench_backends.py); within one backend results are
bit-stable across runs.
"""

import os
from contextlib import contextmanager

from . import _kernels_numpy
from .errors import ConfigError

try:
    from . import _kernels_numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _kernels_numba = None
    HAS_NUMBA = False

_KERNEL_NAMES = (
    "conv3d_forward",
    "conv3d_backward_input",
    "conv3d_backward_weights",
    "tconv3d_forward",
    "tconv3d_backward_input",
    "tconv3d_backward_weights",
    "maxpool3d_forward",
    "maxpool3d_backward",
)

_active = None


def _resolve(name):
    if name == "numba":
        if not HAS_NUMBA:
            raise ConfigError("QSMKIT_BACKEND=numba but numba is not importable")
        return "numba"
    if name == "numpy":
        return "numpy"
    raise ConfigError(f"unknown backend {name!r} (expected 'numba' or 'numpy')")


def active_backend():
    """Name of the backend in use ('numba' or 'numpy')."""
    global _active
    if _active is None:
        env = os.environ.get("QSMKIT_BACKEND")
        if env:
            _active = _resolve(env)
        else:
            _active = "numba" if HAS_NUMBA else "numpy"
    return _active


def set_backend(name):
    """Force a backend; mostly for tests and manifest replay."""
    global _active
    _active = _resolve(name)


@contextmanager
def use_backend(name):
    global _active
    prev = _active
    set_backend(name)
    try:
        yield
    finally:
        _active = prev


def _module():
    return _kernels_numba if active_backend() == "numba" else _kernels_numpy


def __getattr__(name):
    if name in _KERNEL_NAMES:
        return getattr(_module(), name)
    raise AttributeError(name)
