"""Synthetic pretraining corpus and labeled classification tasks.

Every sequence is ``[CLS, content..., PAD...]`` with content drawn from the
non-reserved ids ``4..vocab_size-1``.  Labels follow closed-form rules:

``parity``
    number of occurrences of token 7, mod 2.
``majority``
    1 if more content tokens fall in the lower half of the non-reserved
    range than in the upper half (content length is always odd).
``contains-pattern``
    1 if the bigram (5, 6) occurs contiguously.
``pair-match``
    content is ``A SEP B`` with equal-length segments; 1 if ``A == B``.

Labels are drawn balanced first and examples are generated to match, so
class frequencies are 1/2 in expectation for every kind.
"""
from dataclasses import dataclass

import numpy as np

from .encoder import CLS, N_RESERVED, PAD, SEP
from .errors import ConfigError
from .numerics import make_rng

TASK_KINDS = ("parity", "majority", "contains-pattern", "pair-match")
PARITY_TOKEN = 7
PATTERN = (5, 6)
GRAMMAR_SEED = 20210


@dataclass
class TokenDataset:
    tokens: np.ndarray          # (N, T) int64, PAD-filled
    labels: np.ndarray = None   # (N,) int64, or None for unlabeled corpora
    ids: np.ndarray = None
    name: str = "corpus"
    split: str = "train"
    seed: int = 0

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.ids is None:
            self.ids = np.arange(len(self.tokens), dtype=np.int64)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)

    def __len__(self):
        return len(self.tokens)

    def take(self, n):
        labels = None if self.labels is None else self.labels[:n]
        return TokenDataset(self.tokens[:n], labels, self.ids[:n], self.name, self.split, self.seed)


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "parity"
    n_classes: int = 2
    n_train: int = 4000
    n_validation: int = 512
    seed: int = 0
    seq_len: int = 16

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}; choose from {TASK_KINDS}")
        if self.n_classes != 2:
            raise ConfigError("all synthetic tasks are binary (n_classes=2)")
        if self.n_train < 1 or self.n_validation < 1:
            raise ConfigError("task split sizes must be >= 1")
        if self.seq_len < 4:
            raise ConfigError("seq_len must be >= 4")


def label_of(kind, tokens, vocab_size=64):
    """Closed-form label of one token row (CLS and PAD are ignored)."""
    row = np.asarray(tokens)
    content = row[(row != CLS) & (row != PAD)]
    if kind == "parity":
        return int((content == PARITY_TOKEN).sum() % 2)
    if kind == "majority":
        mid = N_RESERVED + (vocab_size - N_RESERVED) // 2
        return int((content < mid).sum() > (content >= mid).sum())
    if kind == "contains-pattern":
        return int(bool(((content[:-1] == PATTERN[0]) & (content[1:] == PATTERN[1])).any()))
    if kind == "pair-match":
        sep = np.flatnonzero(content == SEP)
        a, b = content[:sep[0]], content[sep[0] + 1:]
        return int(len(a) == len(b) and (a == b).all())
    raise ConfigError(f"unknown task kind {kind!r}")


def _content(rng, n, vocab_size, exclude=()):
    pool = np.setdiff1d(np.arange(N_RESERVED, vocab_size), exclude)
    return rng.choice(pool, size=n)


def _has_pattern(c):
    return bool(((c[:-1] == PATTERN[0]) & (c[1:] == PATTERN[1])).any())


def _example(kind, label, rng, seq_len, vocab_size):
    if kind == "parity":
        n = int(rng.integers(seq_len // 2, seq_len + 1))
        counts = [c for c in range(0, min(n, 4) + 1) if c % 2 == label]
        c = rng.choice(counts)
        content = _content(rng, n, vocab_size, exclude=[PARITY_TOKEN])
        content[rng.choice(n, size=c, replace=False)] = PARITY_TOKEN
        return content
    if kind == "majority":
        n = int(rng.integers(seq_len // 2, seq_len + 1))
        n -= 1 - n % 2  # odd length, so there is never a tie
        while True:
            content = _content(rng, n, vocab_size)
            if label_of(kind, content, vocab_size) == label:
                return content
    if kind == "contains-pattern":
        n = int(rng.integers(seq_len // 2, seq_len + 1))
        while True:
            content = _content(rng, n, vocab_size)
            if label:
                at = int(rng.integers(0, n - 1))
                content[at:at + 2] = PATTERN
                return content
            if not _has_pattern(content):
                return content
    if kind == "pair-match":
        m = (seq_len - 1) // 2
        a = _content(rng, m, vocab_size)
        b = a.copy() if label else _content(rng, m, vocab_size)
        while not label and (a == b).all():
            b = _content(rng, m, vocab_size)
        return np.concatenate([a, [SEP], b])
    raise ConfigError(f"unknown task kind {kind!r}")


def _pack(rows, width):
    out = np.full((len(rows), width), PAD, dtype=np.int64)
    out[:, 0] = CLS
    for i, r in enumerate(rows):
        out[i, 1:1 + len(r)] = r
    return out


def gen_task(spec, vocab_size=64):
    """Return (train, validation) labeled datasets for ``spec``.

    Example ids are 0..n_train-1 for train and continue from n_train for
    validation, so the splits are disjoint by id.
    """
    rng = make_rng(spec.seed, TASK_KINDS.index(spec.kind))
    total = spec.n_train + spec.n_validation
    labels = rng.integers(0, 2, size=total)
    rows = [_example(spec.kind, int(y), rng, spec.seq_len, vocab_size) for y in labels]
    tokens = _pack(rows, spec.seq_len + 1)
    ids = np.arange(total, dtype=np.int64)
    cut = spec.n_train
    train = TokenDataset(tokens[:cut], labels[:cut], ids[:cut], spec.kind, "train", spec.seed)
    val = TokenDataset(tokens[cut:], labels[cut:], ids[cut:], spec.kind, "validation", spec.seed)
    return train, val


def _grammar(vocab_size):
    """Sparse first-order transition table over the non-reserved ids."""
    rng = make_rng(GRAMMAR_SEED)
    n = vocab_size - N_RESERVED
    succ = np.stack([rng.choice(n, size=4, replace=False) for _ in range(n)]) + N_RESERVED
    return succ, np.array([0.4, 0.3, 0.2, 0.1])


def gen_corpus(seed, size, max_len=32, vocab_size=64, min_len=8):
    """Unlabeled Markov-chain sequences for MLM / RTD pretraining."""
    if size < 1:
        raise ConfigError("corpus size must be >= 1")
    rng = make_rng(seed, 99)
    succ, probs = _grammar(vocab_size)
    width = max_len
    lengths = rng.integers(min(min_len, width - 1), width, size=size)  # content tokens
    tokens = np.full((size, width), PAD, dtype=np.int64)
    tokens[:, 0] = CLS
    cur = rng.integers(N_RESERVED, vocab_size, size=size)
    tokens[:, 1] = cur
    for pos in range(2, width):
        pick = rng.choice(4, size=size, p=probs)
        cur = succ[cur - N_RESERVED, pick]
        live = lengths >= pos
        tokens[live, pos] = cur[live]
    return TokenDataset(tokens, None, None, "corpus", "train", seed)
