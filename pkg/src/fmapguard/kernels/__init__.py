"""Kernel backend selection.

The numba path is used when numba imports cleanly. Setting
``FMAPGUARD_KERNELS=numpy`` in the environment forces the pure-numpy path;
``set_backend`` switches at runtime (tests and the benchmark use it).

Results are bitwise reproducible within one backend. The two backends agree
only to rounding error since their reduction orders differ.
"""
from __future__ import annotations

import os
import types

from . import _numpy

try:
    from . import _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

KERNEL_NAMES = (
    "conv2d", "conv2d_grad_input", "conv2d_grad_weight",
    "maxpool2d", "maxpool2d_grad", "avgpool2d", "avgpool2d_grad",
    "dense", "dense_grad_input", "dense_grad_weight",
)

ENV_FLAG = "FMAPGUARD_KERNELS"

_active: types.ModuleType = _numpy


def available_backends() -> list[str]:
    return ["numba", "numpy"] if _numba is not None else ["numpy"]


def set_backend(name: str) -> None:
    global _active
    if name == "numba":
        if _numba is None:
            raise RuntimeError("numba backend requested but numba is not importable")
        _active = _numba
    elif name == "numpy":
        _active = _numpy
    else:
        raise ValueError(f"unknown kernel backend {name!r} (expected 'numba' or 'numpy')")


def get_backend() -> str:
    return "numba" if _active is _numba else "numpy"


def set_threads(threads: int | None) -> None:
    """Cap the numba worker pool. No-op for the numpy backend."""
    if threads is None or _numba is None:
        return
    import numba

    numba.set_num_threads(max(1, min(int(threads), numba.config.NUMBA_NUM_THREADS)))


def __getattr__(name):
    if name in KERNEL_NAMES:
        return getattr(_active, name)
    raise AttributeError(name)


set_backend(os.environ.get(ENV_FLAG, "numba" if _numba is not None else "numpy").strip().lower())
