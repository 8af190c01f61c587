"""Losses, Adam with linear warmup, and the three training regimes.

``pretrain`` (MLM or RTD), ``finetune`` (every parameter, classification
loss) and ``tune_head`` (a classification head on frozen CLS features).
Desk-scale defaults live in ``TrainConfig``; the values used for the
full-size models are kept in ``FULL_SCALE_TRAIN_CONFIG`` for fidelity runs.
"""
import csv
import io
from dataclasses import dataclass

import numpy as np

from . import encoder as enc
from .encoder import MASK, N_RESERVED, PAD, SEP
from .errors import ConfigError, DimensionMismatch, EmptyDataset, StepOutOfRange
from .numerics import make_rng

OBJECTIVES = ("mlm", "rtd")
MASK_PROB = 0.15
LOG_COLUMNS = ("step", "lr", "loss", "eval_metric")


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 1e-3
    batch_size: int = 8
    warmup_steps: int = 100
    max_steps: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.base_lr <= 0 or self.batch_size < 1:
            raise ConfigError("base_lr and batch_size must be positive")
        if self.max_steps < 0 or self.warmup_steps < 0:
            raise ConfigError("step counts must be non-negative")
        if self.warmup_steps > self.max_steps:
            raise ConfigError("warmup_steps must not exceed max_steps")


# full-size fine-tuning recipe: batch 4, lr 1e-5, 1,000 warmup steps, up to 10,000 steps
FULL_SCALE_TRAIN_CONFIG = TrainConfig(base_lr=1e-5, batch_size=4, warmup_steps=1000, max_steps=10000)


def lr_at(config, t):
    """Linear warmup to base_lr over warmup_steps, then constant."""
    if not 1 <= t <= config.max_steps:
        raise StepOutOfRange(f"step {t} outside 1..{config.max_steps}")
    if t <= config.warmup_steps:
        return config.base_lr * t / config.warmup_steps
    return config.base_lr


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, size):
        return cls(np.zeros(size), np.zeros(size))


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update of the flat vector ``params`` in place."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise DimensionMismatch(f"shapes differ: {params.shape}, {grads.shape}, {state.m.shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1 - b1) * grads
    state.v *= b2
    state.v += (1 - b2) * grads * grads
    m_hat = state.m / (1 - b1 ** state.t)
    v_hat = state.v / (1 - b2 ** state.t)
    params -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


# --------------------------------------------------------------------------
# losses: each returns (loss, dLoss/d final hidden) and writes head grads


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_xent(logits, labels):
    logp = _log_softmax(logits)
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    d = np.exp(logp)
    d[np.arange(n), labels] -= 1.0
    return float(loss), d / n


def classification_loss(params, trace, labels, grads):
    head = params.classifier()
    logits, cache = enc.head_forward(head, trace.cls_state, return_cache=True)
    loss, dlogits = softmax_xent(logits, labels)
    d_final = np.zeros_like(trace.final)
    d_final[:, 0, :] = enc.head_backward(head, cache, dlogits, grads.classifier())
    return loss, d_final


def mlm_loss(params, trace, positions, targets, grads):
    """Cross-entropy at masked ``positions`` (tuple of row/col index arrays)."""
    h = trace.final[positions]
    loss, dlogits = softmax_xent(enc.mlm_logits(params, h), targets)
    grads["mlm.w"] += h.T @ dlogits
    grads["mlm.b"] += dlogits.sum(0)
    d_final = np.zeros_like(trace.final)
    d_final[positions] = dlogits @ params["mlm.w"].T
    return loss, d_final


def rtd_loss(params, trace, replaced, valid, grads):
    """Per-token binary cross-entropy over ``valid`` (non-PAD) positions."""
    z = enc.rtd_logits(params, trace.final)
    y = replaced.astype(np.float64)
    w = valid.astype(np.float64)
    count = w.sum()
    per_tok = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    loss = float((per_tok * w).sum() / count)
    dz = (1.0 / (1.0 + np.exp(-z)) - y) * w / count
    grads["rtd.w"] += np.einsum("bt,btd->d", dz, trace.final)
    grads["rtd.b"] += dz.sum()
    return loss, dz[..., None] * params["rtd.w"]


# --------------------------------------------------------------------------
# corruption for pretraining


def _candidates(tokens):
    return tokens >= N_RESERVED


def mask_tokens(tokens, rng, vocab_size):
    """BERT-style masking: 15% of content positions; 80% MASK, 10% random, 10% kept.

    Returns (inputs, positions, targets).  At least one position is selected.
    """
    cand = _candidates(tokens)
    pick = cand & (rng.random(tokens.shape) < MASK_PROB)
    if not pick.any():
        rows, cols = np.nonzero(cand)
        j = int(rng.integers(len(rows)))
        pick[rows[j], cols[j]] = True
    positions = np.nonzero(pick)
    targets = tokens[positions]
    inputs = tokens.copy()
    r = rng.random(len(targets))
    rand_tok = rng.integers(N_RESERVED, vocab_size, size=len(targets))
    new = np.where(r < 0.8, MASK, np.where(r < 0.9, rand_tok, targets))
    inputs[positions] = new
    return inputs, positions, targets


def replace_tokens(tokens, rng, vocab_size):
    """RTD corruption: 15% of content positions get a different random id.

    Returns (inputs, replaced mask, valid mask).
    """
    cand = _candidates(tokens)
    pick = cand & (rng.random(tokens.shape) < MASK_PROB)
    span = vocab_size - N_RESERVED
    shift = rng.integers(1, span, size=tokens.shape)
    swapped = (tokens - N_RESERVED + shift) % span + N_RESERVED
    inputs = np.where(pick, swapped, tokens)
    return inputs, pick, tokens != PAD


def _trim(tokens):
    """Drop trailing all-PAD columns so batches only pay for real length."""
    live = (tokens != PAD).any(axis=0)
    return tokens[:, :int(np.flatnonzero(live)[-1]) + 1]


# --------------------------------------------------------------------------
# objective wrapper used by the loops and by gradient checks


def loss_and_grad(params, tokens, objective, rng, labels=None, mode=enc.FULL):
    """Scalar loss and full gradient (EncoderParams layout) for one batch.

    ``objective`` is "classify", "mlm" or "rtd".  ``rng`` drives corruption
    and dropout (dropout is off when the config's dropout_rate is 0).
    """
    cfg = params.config
    grads = params.zeros_like()
    if objective == "classify":
        trace = enc.forward(params, tokens, mode, train=True, rng=rng)
        loss, d_final = classification_loss(params, trace, labels, grads)
    elif objective == "mlm":
        inputs, positions, targets = mask_tokens(tokens, rng, cfg.vocab_size)
        trace = enc.forward(params, inputs, mode, train=True, rng=rng)
        loss, d_final = mlm_loss(params, trace, positions, targets, grads)
    elif objective == "rtd":
        inputs, replaced, valid = replace_tokens(tokens, rng, cfg.vocab_size)
        trace = enc.forward(params, inputs, mode, train=True, rng=rng)
        loss, d_final = rtd_loss(params, trace, replaced, valid, grads)
    else:
        raise ConfigError(f"unknown objective {objective!r}")
    enc.backward(trace, params, d_final, grads)
    return loss, grads


# --------------------------------------------------------------------------
# training loops


@dataclass
class LogRow:
    step: int
    lr: float
    loss: float
    eval_metric: float = None


def log_csv(rows):
    """Training log as CSV text (columns step, lr, loss, eval_metric)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for r in rows:
        w.writerow([r.step, f"{r.lr:.9g}", f"{r.loss:.9g}",
                    "" if r.eval_metric is None else f"{r.eval_metric:.9g}"])
    return buf.getvalue()


def _batches(rng, n, batch_size):
    while True:
        order = rng.permutation(n)
        for i in range(0, n - batch_size + 1 if n >= batch_size else 1, batch_size):
            yield order[i:i + batch_size]


def _run(store, step_loss, config, log, eval_fn=None, eval_every=0):
    state = AdamState.fresh(store.flat.size)
    for t in range(1, config.max_steps + 1):
        lr = lr_at(config, t)
        loss, grads = step_loss()
        adam_step(store.flat, grads.flat, state, lr)
        metric = None
        if eval_fn is not None and eval_every and (t % eval_every == 0 or t == config.max_steps):
            metric = eval_fn(store)
        if log is not None:
            log.append(LogRow(t, lr, loss, metric))
    return store


def pretrain(params, corpus, objective, config, log=None):
    """Pretrain a copy of ``params`` with MLM or RTD; the input is not modified."""
    if objective not in OBJECTIVES:
        raise ConfigError(f"objective must be one of {OBJECTIVES}")
    if len(corpus) == 0:
        raise EmptyDataset("pretraining corpus is empty")
    params = params.copy()
    rng = make_rng(config.seed, 1)
    batches = _batches(rng, len(corpus), config.batch_size)

    def step():
        tokens = _trim(corpus.tokens[next(batches)])
        return loss_and_grad(params, tokens, objective, rng)

    return _run(params, step, config, log)


def finetune(params, train_set, config, val_set=None, log=None, eval_every=250):
    """Fine-tune every parameter on a labeled task.

    The classification head is re-initialized from ``config.seed``, so runs
    with different seeds are independent restarts from the same encoder.
    """
    if len(train_set) == 0:
        raise EmptyDataset("training split is empty")
    params = params.copy()
    rng = make_rng(config.seed, 2)
    params.set_classifier(enc.init_head(params.config.d_model, params.config.n_classes, rng))
    batches = _batches(rng, len(train_set), config.batch_size)

    def step():
        idx = next(batches)
        return loss_and_grad(params, _trim(train_set.tokens[idx]), "classify", rng,
                             labels=train_set.labels[idx])

    eval_fn = None
    if val_set is not None:
        def eval_fn(p):
            return accuracy(head_logits(p.classifier(), enc.cls_states(p, val_set.tokens)),
                            val_set.labels)
    return _run(params, step, config, log, eval_fn, eval_every)


def head_logits(head, features):
    return enc.head_forward(head, features)


def accuracy(logits, labels):
    return float((np.argmax(logits, axis=1) == labels).mean())


def head_loss(head, features, labels):
    return softmax_xent(enc.head_forward(head, features), labels)[0]


def tune_head(features, labels, config, init=None, n_classes=2, select="loss", check_every=25):
    """Fit a classification head on frozen CLS features (N x d).

    ``init`` warm-starts from an existing head (copied, never mutated);
    otherwise the head is freshly initialized from ``config.seed``.  The
    returned head is the best one seen on the full training features,
    starting point included, by ``select`` ("loss", or "accuracy" with loss
    as tie-break).
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if len(features) == 0:
        raise EmptyDataset("no features to tune a head on")
    if select not in ("loss", "accuracy"):
        raise ConfigError(f"select must be 'loss' or 'accuracy', got {select!r}")
    rng = make_rng(config.seed, 3)
    d = features.shape[1]
    head = init.copy() if init is not None else enc.init_head(d, n_classes, rng)
    if head.d_model != d:
        raise DimensionMismatch(f"head expects dim {head.d_model}, features have {d}")

    def score(h):
        logits = enc.head_forward(h, features)
        loss = softmax_xent(logits, labels)[0]
        return (loss,) if select == "loss" else (-accuracy(logits, labels), loss)

    best, best_score = head.copy(), score(head)
    state = AdamState.fresh(head.flat.size)
    batches = _batches(rng, len(features), config.batch_size)
    for t in range(1, config.max_steps + 1):
        idx = next(batches)
        logits, cache = enc.head_forward(head, features[idx], return_cache=True)
        _, dlogits = softmax_xent(logits, labels[idx])
        grads = head.zeros_like()
        enc.head_backward(head, cache, dlogits, grads)
        adam_step(head.flat, grads.flat, state, lr_at(config, t))
        if t % check_every == 0 or t == config.max_steps:
            s = score(head)
            if s < best_score:
                best, best_score = head.copy(), s
    return best
