"""Detect the earlier/later block-diagonal split of a layer CKA matrix.

For a split after layer k the clusters are {0..k} and {k+1..L}, and

    S(k) = mean(intra-cluster off-diagonal entries) - mean(inter-cluster entries)

The split reported is argmax_k S(k), ties going to the smaller k.  Layer
order matters: permuting layers changes the answer.  When both clusters are
single layers (a 2 x 2 matrix) the intra mean is taken as 0.
"""
from dataclasses import dataclass

import numpy as np

from . import numerics
from .errors import DimensionMismatch, TooFewLayers, UndefinedCells


@dataclass(frozen=True)
class BlockSplit:
    split_index: int
    block_score: float
    profile: np.ndarray


def _scores(m):
    scores = m.scores if hasattr(m, "scores") else np.asarray(m, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise DimensionMismatch(f"block detection needs a square matrix, got {scores.shape}")
    if scores.shape[0] < 2:
        raise TooFewLayers("block detection needs at least 2 layers")
    defined = getattr(m, "defined", None)
    if defined is not None and not defined.all():
        raise UndefinedCells("CKA matrix has undefined cells")
    return scores


def defined_layers(m):
    """Drop zero-variance layers (undefined diagonal cell) from a square matrix.

    The layer-0 CLS state is the same for every example (CLS embedding plus
    position 0), so its CKA row is undefined by construction.  Returns the
    reduced score matrix and the original indices of the kept layers.
    """
    scores = np.asarray(m.scores)
    defined = getattr(m, "defined", np.ones(scores.shape, dtype=bool))
    keep = [i for i in range(scores.shape[0]) if defined[i, i]]
    return scores[np.ix_(keep, keep)], keep


def split_profile(m):
    """S(k) for every k in 0..L-1."""
    return numerics.block_profile(_scores(m))


def detect_block_split(m):
    profile = split_profile(m)
    k = int(np.argmax(profile))  # first maximum -> smallest k on ties
    return BlockSplit(k, float(profile[k]), profile)


def block_contrast(m_ft, m_orig):
    """block_score(m_ft) - block_score(m_orig); > 0 means sharper blocks after tuning."""
    a, b = _scores(m_ft), _scores(m_orig)
    if a.shape != b.shape:
        raise DimensionMismatch(f"matrix shapes differ: {a.shape} vs {b.shape}")
    return detect_block_split(m_ft).block_score - detect_block_split(m_orig).block_score
