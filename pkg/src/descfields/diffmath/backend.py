"""Kernel backend selection: compiled extension if built, NumPy otherwise.

Set DESCFIELDS_FORCE_NUMPY=1 to ignore the extension (used by the parity
tests and the kernel benchmark).
"""

import os

from . import kernels_numpy

HAVE_NATIVE = False
_native = None

if not os.environ.get("DESCFIELDS_FORCE_NUMPY"):
    try:
        from . import _kernels as _native  # type: ignore[attr-defined]

        HAVE_NATIVE = True
    except ImportError:
        _native = None

active = _native if HAVE_NATIVE else kernels_numpy


def backends() -> dict:
    """Name -> module for every available backend (benchmarks/tests)."""
    out = {"numpy": kernels_numpy}
    if _native is not None:
        out["native"] = _native
    return out
