"""Shared oracles for the unit and acceptance suites."""
from dataclasses import replace

import numpy as np

from layercka import encoder as enc
from layercka import training

FD_EPS = 1e-5
GRAD_TOL = 1e-6
GRAD_FLOOR = 1e-3


def gradcheck_setup(config, seed=0, noise=0.3):
    """Dropout-free params with non-trivial weights plus a fixed batch.

    Init-scale weights give gradients near round-off in deep layers, so every
    tensor gets N(0, noise^2) added before checking.
    """
    config = replace(config, dropout_rate=0.0)
    rng = np.random.default_rng(seed)
    params = enc.init_params(config, rng)
    params.flat += rng.normal(0.0, noise, params.flat.shape)
    v = config.vocab_size
    tokens = np.array([[enc.CLS, 5, 9, 12, 30, enc.SEP],
                       [enc.CLS, 7, v - 1, enc.SEP, enc.PAD, enc.PAD]])
    labels = np.array([1, 0]) % config.n_classes
    positions = (np.array([0, 0, 1]), np.array([1, 4, 2]))
    targets = np.array([11, 20, 6])
    replaced = np.zeros(tokens.shape, dtype=bool)
    replaced[0, 2] = replaced[1, 1] = True
    return params, (tokens, labels, positions, targets, replaced)


def combined_loss(params, batch, mode=enc.FULL):
    """Classification + MLM + RTD on one clean forward; touches every parameter."""
    tokens, labels, positions, targets, replaced = batch
    final = enc.forward(params, tokens, mode).final
    loss, _ = training.softmax_xent(enc.head_forward(params.classifier(), final[:, 0]), labels)
    mlm, _ = training.softmax_xent(enc.mlm_logits(params, final[positions]), targets)
    z = enc.rtd_logits(params, final)
    valid = tokens != enc.PAD
    y = replaced.astype(np.float64)
    rtd = ((np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))) * valid).sum() / valid.sum()
    return loss + mlm + rtd


def combined_grad(params, batch, mode=enc.FULL):
    tokens, labels, positions, targets, replaced = batch
    grads = params.zeros_like()
    trace = enc.forward(params, tokens, mode, train=True, rng=np.random.default_rng(0))
    l1, d1 = training.classification_loss(params, trace, labels, grads)
    l2, d2 = training.mlm_loss(params, trace, positions, targets, grads)
    l3, d3 = training.rtd_loss(params, trace, replaced, tokens != enc.PAD, grads)
    enc.backward(trace, params, d1 + d2 + d3, grads)
    return l1 + l2 + l3, grads


def numeric_grad(params, batch, mode=enc.FULL, eps=FD_EPS):
    flat = params.flat
    out = np.empty_like(flat)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        up = combined_loss(params, batch, mode)
        flat[i] = keep - eps
        down = combined_loss(params, batch, mode)
        flat[i] = keep
        out[i] = (up - down) / (2 * eps)
    return out


def tensor_errors(params, analytic, numeric):
    """Per tensor: max|a - n| / max(max|a|, max|n|, floor)."""
    errs = {}
    for name in params.names():
        start, stop = params.bounds(name)
        a, n = analytic[start:stop], numeric[start:stop]
        scale = max(np.abs(a).max(), np.abs(n).max(), GRAD_FLOOR)
        errs[name] = float(np.abs(a - n).max() / scale)
    return errs


def gradcheck(config, seed=0, mode=enc.FULL):
    params, batch = gradcheck_setup(config, seed)
    _, grads = combined_grad(params, batch, mode)
    return tensor_errors(params, grads.flat, numeric_grad(params, batch, mode))


def brute_force_split(m):
    """Exhaustive argmax of S(k) written directly from the definition."""
    m = np.asarray(m, dtype=np.float64)
    L = len(m)
    best_k, best = None, None
    for k in range(L - 1):
        first, second = list(range(k + 1)), list(range(k + 1, L))
        intra = [m[i, j] - m[0, 1] for g in (first, second) for i in g for j in g if i != j]
        inter = [m[i, j] - m[0, 1] for i in range(L) for j in range(L)
                 if (i in first) != (j in first)]
        s = (sum(intra) / len(intra) if intra else 0.0) - sum(inter) / len(inter)
        if best is None or s > best:
            best_k, best = k, s
    return best_k, best


# acceptance lines keyed by criterion number, echoed in the terminal summary
ACCEPTANCE = {}
