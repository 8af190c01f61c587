"""Dense 64-bit matrix helpers, kernel dispatch and seeded RNG streams.

Matrices are plain ``float64`` numpy arrays.  The handful of kernels that sit
on the CKA hot path (trace products, double-centering, block profiles) come
from the compiled ``_ckernels`` extension when it is importable, otherwise
from the numpy versions in ``_kernels_py``.  Set ``LAYERCKA_PURE_PYTHON=1`` to
force the fallback.
"""
import os

import numpy as np

from .errors import DimensionMismatch

if os.environ.get("LAYERCKA_PURE_PYTHON", "") not in ("", "0"):
    from . import _kernels_py as _kernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _kernels
        BACKEND = "cython"
    except ImportError:  # extension not built
        from . import _kernels_py as _kernels
        BACKEND = "python"


def as_matrix(a):
    """Coerce to a C-contiguous 2-D float64 array with finite entries."""
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionMismatch(f"expected a 2-D matrix, got shape {m.shape}")
    if not np.isfinite(m).all():
        raise ValueError("matrix contains NaN or Inf")
    return m


def matmul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionMismatch(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def transpose(a):
    return np.asarray(a, dtype=np.float64).T


def _square_pair(a, b):
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape != b.shape:
        raise DimensionMismatch(
            f"trace_product needs equal square matrices, got {a.shape} and {b.shape}")
    return a, b


def trace_product(a, b):
    """tr(a @ b) without forming the product."""
    a, b = _square_pair(a, b)
    return float(_kernels.trace_product(a, b))


def frobenius_sq(a):
    return float(_kernels.frobenius_sq(np.ascontiguousarray(a, dtype=np.float64)))


def double_center(k):
    """H k H with H = I - 11^T/n, computed from row/column means."""
    k = np.ascontiguousarray(k, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got {k.shape}")
    return np.asarray(_kernels.center_gram(k))


def block_profile(m):
    m = np.ascontiguousarray(m, dtype=np.float64)
    return np.asarray(_kernels.block_profile(m))


def make_rng(seed, *stream):
    """Counter-based (Philox) generator for ``seed``.

    Extra ``stream`` integers select independent, reproducible sub-streams,
    e.g. ``make_rng(seed, 3)`` for the third restart.
    """
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=tuple(stream))
    return np.random.Generator(np.random.Philox(ss))
