"""Linear CKA and HSIC between layer representations.

For representations ``X`` (n x d1) and ``Y`` (n x d2) with linear Gram
matrices ``K = X X^T`` and ``L = Y Y^T``::

    HSIC(K, L) = tr(K H L H) / (n - 1)^2,      H = I_n - 11^T / n
    CKA(K, L)  = HSIC(K, L) / sqrt(HSIC(K, K) HSIC(L, L))

Two evaluation routes are provided.  The Gram route follows the formula
literally (O(n^2) memory); the feature route uses the identity
``tr(K H L H) = ||Yc^T Xc||_F^2`` on column-centered features and is what
layer grids use, since it only costs O(n d^2).
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import numerics
from .errors import DimensionMismatch, ManifestMismatch, TooFewExamples, ZeroVariance

# HSIC(K, K) below this means the representation is constant across examples
ZERO_VARIANCE = 1e-300
# centered energy below this fraction of raw energy is centering round-off
RELATIVE_VARIANCE = 1e-24


@dataclass(frozen=True)
class GramMatrix:
    values: np.ndarray

    @property
    def n(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class CenteringProjector:
    """H = I_n - (1/n) 11^T."""

    n: int

    def matrix(self):
        return np.eye(self.n) - np.full((self.n, self.n), 1.0 / self.n)


@dataclass
class CKAMatrix:
    """Similarity grid between the layers of two activation stacks.

    ``defined[i, j]`` is False where one of the two layers has zero centered
    variance; ``scores`` holds 0.0 there as a placeholder.
    """

    rows_model: str
    cols_model: str
    scores: np.ndarray
    n_examples: int
    defined: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.defined is None:
            self.defined = np.ones(self.scores.shape, dtype=bool)

    @property
    def shape(self):
        return self.scores.shape

    @property
    def has_undefined(self):
        return not bool(self.defined.all())


def gram(x):
    x = numerics.as_matrix(x)
    if x.shape[0] < 2:
        raise TooFewExamples(f"need at least 2 examples, got {x.shape[0]}")
    return GramMatrix(numerics.matmul(x, numerics.transpose(x)))


def center(k):
    return GramMatrix(numerics.double_center(k.values))


def _hsic_raw(k, l):
    """tr(K H L H) for two Gram matrices."""
    if k.n != l.n:
        raise DimensionMismatch(f"Gram sizes differ: {k.n} vs {l.n}")
    if k.n < 2:
        raise TooFewExamples(f"need at least 2 examples, got {k.n}")
    kc = numerics.double_center(k.values)
    lc = numerics.double_center(l.values)
    return numerics.trace_product(kc, lc)


def hsic(k, l):
    return _hsic_raw(k, l) / (k.n - 1) ** 2


def hsic_features(x, y):
    """HSIC from centered features: ||Yc^T Xc||_F^2 / (n-1)^2, no n x n matrices."""
    x, y = _check_pair(x, y)
    xc = x - x.mean(axis=0, keepdims=True)
    yc = y - y.mean(axis=0, keepdims=True)
    return numerics.frobenius_sq(numerics.matmul(numerics.transpose(yc), xc)) / (len(x) - 1) ** 2


def _check_pair(x, y):
    x = numerics.as_matrix(x)
    y = numerics.as_matrix(y)
    if x.shape[0] != y.shape[0]:
        raise DimensionMismatch(f"example counts differ: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise TooFewExamples(f"need at least 2 examples, got {x.shape[0]}")
    return x, y


def _normalize(xy, xx, yy):
    if xx < ZERO_VARIANCE or yy < ZERO_VARIANCE:
        raise ZeroVariance("representation has zero centered variance; CKA undefined")
    # product of roots, not root of product: avoids overflow for large norms
    value = xy / (np.sqrt(xx) * np.sqrt(yy))
    return float(min(max(value, 0.0), 1.0))


def linear_cka_gram(x, y):
    """CKA through explicit Gram matrices and the trace formula."""
    x, y = _check_pair(x, y)
    if not (_centered(x).any() and _centered(y).any()):
        raise ZeroVariance("representation has zero centered variance; CKA undefined")
    k, l = gram(x), gram(y)
    return _normalize(hsic(k, l), hsic(k, k), hsic(l, l))


def _centered(x):
    xc = x - x.mean(axis=0, keepdims=True)
    if numerics.frobenius_sq(xc) <= RELATIVE_VARIANCE * numerics.frobenius_sq(x):
        # constant rows: zero out round-off so the ZeroVariance guard fires
        xc = np.zeros_like(xc)
    return xc


def linear_cka_features(x, y):
    """CKA via ||Yc^T Xc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F)."""
    x, y = _check_pair(x, y)
    xc, yc = _centered(x), _centered(y)
    return _feature_cka(xc, yc, _self_term(xc), _self_term(yc))


def _self_term(xc):
    return numerics.frobenius_sq(xc.T @ xc)


def _feature_cka(xc, yc, xx, yy):
    return _normalize(numerics.frobenius_sq(yc.T @ xc), xx, yy)


def linear_cka(x, y, method="features"):
    if method == "features":
        return linear_cka_features(x, y)
    if method == "gram":
        return linear_cka_gram(x, y)
    raise ValueError(f"unknown CKA method {method!r}")


def cka_matrix(a, b, workers=1):
    """Layer-by-layer CKA grid between two ActivationSets.

    Both sets must come from the same example set (same manifest hash).
    Cells involving a zero-variance layer are flagged undefined instead of
    aborting the grid.
    """
    if a.manifest_hash != b.manifest_hash or a.n_examples != b.n_examples:
        raise ManifestMismatch(
            f"activation sets cover different examples "
            f"({a.manifest_hash:016x}/{a.n_examples} vs {b.manifest_hash:016x}/{b.n_examples})")
    if a.n_examples < 2:
        raise TooFewExamples(f"need at least 2 examples, got {a.n_examples}")
    # each layer is centered once and its self term computed once
    ca = [_centered(numerics.as_matrix(m)) for m in a.layers]
    cb = ca if b is a else [_centered(numerics.as_matrix(m)) for m in b.layers]
    sa = [_self_term(m) for m in ca]
    sb = sa if b is a else [_self_term(m) for m in cb]

    shape = (len(ca), len(cb))
    scores = np.zeros(shape)
    defined = np.ones(shape, dtype=bool)

    def cell(ij):
        i, j = ij
        try:
            scores[i, j] = _feature_cka(ca[i], cb[j], sa[i], sb[j])
        except ZeroVariance:
            defined[i, j] = False

    cells = [(i, j) for i in range(shape[0]) for j in range(shape[1])]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(cell, cells))
    else:
        for ij in cells:
            cell(ij)
    return CKAMatrix(a.model_label, b.model_label, scores, a.n_examples, defined)
