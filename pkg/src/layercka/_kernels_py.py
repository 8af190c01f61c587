"""Numpy implementations of the numerics kernels.

Used when the compiled ``_ckernels`` extension is unavailable or when
``LAYERCKA_PURE_PYTHON=1`` is set.  Signatures mirror the extension exactly.
"""
import numpy as np


def trace_product(a, b):
    # tr(a @ b) = sum_ij a_ij * b_ji; the n x n product is never formed
    return float(np.einsum("ij,ji->", a, b))


def frobenius_sq(a):
    flat = a.ravel()
    return float(flat @ flat)


def center_gram(k):
    row = k.mean(axis=1, keepdims=True)
    col = k.mean(axis=0, keepdims=True)
    return k - row - col + k.mean()


def block_profile(m):
    n = m.shape[0]
    # S(k) is invariant to a constant shift; anchoring on an off-diagonal
    # entry makes constant matrices score exactly zero.
    shifted = m - m[0, 1]
    offdiag = ~np.eye(n, dtype=bool)
    idx = np.arange(n)
    out = np.empty(n - 1)
    for k in range(n - 1):
        left = idx <= k
        same = left[:, None] == left[None, :]
        intra = same & offdiag
        inter = ~same
        n_intra = intra.sum()
        intra_mean = shifted[intra].sum() / n_intra if n_intra else 0.0
        out[k] = intra_mean - shifted[inter].sum() / inter.sum()
    return out
