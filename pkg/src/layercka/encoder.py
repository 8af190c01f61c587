"""Small post-LN residual Transformer encoder with exact manual backprop.

Each block computes ``x <- LN(x + Attn(x)); x <- LN(x + FF(x))``.  Layer 0 is
the post-embedding state (token + learned position embedding, then LN), and
layer ``k`` is the state after block ``k``.  Token position 0 always holds the
reserved CLS id and its state feeds the classification head.

All parameters of a model live in one flat float64 vector (``ParamStore``);
named tensors are views into it.  Gradients use the same layout, which keeps
the optimizer, finite-difference checks and checkpoints trivial.
"""
import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import (ConfigError, DimensionMismatch, FormatError, InvalidMode, InvalidToken,
                     ModeMismatch, SequenceTooLong)

CLS, PAD, MASK, SEP = 0, 1, 2, 3
N_RESERVED = 4
LN_EPS = 1e-12
INIT_STD = 0.02


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int = 64
    max_len: int = 32
    d_model: int = 32
    n_heads: int = 4
    n_layers: int = 8
    d_ff: int = 64
    dropout_rate: float = 0.1
    n_classes: int = 2

    def __post_init__(self):
        for name in ("vocab_size", "max_len", "d_model", "n_heads", "n_layers", "d_ff", "n_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.vocab_size <= N_RESERVED:
            raise ConfigError("vocab_size must leave room beyond the 4 reserved ids")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")

    @property
    def d_head(self):
        return self.d_model // self.n_heads


# --------------------------------------------------------------------------
# parameter storage


class ParamStore:
    """Named float64 tensors packed into a single flat vector."""

    def __init__(self, layout, flat=None):
        self.layout = tuple((name, tuple(shape)) for name, shape in layout)
        self._slices = {}
        offset = 0
        for name, shape in self.layout:
            size = int(np.prod(shape))
            self._slices[name] = (offset, offset + size, shape)
            offset += size
        if flat is None:
            flat = np.zeros(offset)
        elif flat.shape != (offset,):
            raise DimensionMismatch(f"flat vector has {flat.shape}, layout needs ({offset},)")
        self.flat = flat

    def __getitem__(self, name):
        lo, hi, shape = self._slices[name]
        return self.flat[lo:hi].reshape(shape)

    def __setitem__(self, name, value):
        view = self[name]
        if value is not view:
            view[...] = value

    def __contains__(self, name):
        return name in self._slices

    def names(self):
        return [name for name, _ in self.layout]

    def bounds(self, name):
        """(lo, hi) flat range of one tensor."""
        return self._slices[name][:2]

    def span(self, prefix):
        """(lo, hi) flat range covered by every tensor whose name starts with prefix."""
        hits = [self._slices[n][:2] for n in self._slices if n.startswith(prefix)]
        return min(h[0] for h in hits), max(h[1] for h in hits)

    def digest(self):
        return hashlib.sha256(np.ascontiguousarray(self.flat, dtype="<f8").tobytes()).hexdigest()

    def zeros_like(self):
        return type(self)._rebuild(self, np.zeros_like(self.flat))

    def copy(self):
        return type(self)._rebuild(self, self.flat.copy())

    @classmethod
    def _rebuild(cls, other, flat):
        return ParamStore(other.layout, flat)


def _head_layout(d_model, n_classes, prefix=""):
    return [(prefix + "w1", (d_model, d_model)), (prefix + "b1", (d_model,)),
            (prefix + "w2", (d_model, n_classes)), (prefix + "b2", (n_classes,))]


def param_layout(config):
    d, f, v = config.d_model, config.d_ff, config.vocab_size
    layout = [("tok_emb", (v, d)), ("pos_emb", (config.max_len, d)),
              ("emb_ln.g", (d,)), ("emb_ln.b", (d,))]
    for b in range(1, config.n_layers + 1):
        p = f"blocks.{b}."
        layout += [(p + "wq", (d, d)), (p + "bq", (d,)), (p + "wk", (d, d)), (p + "bk", (d,)),
                   (p + "wv", (d, d)), (p + "bv", (d,)), (p + "wo", (d, d)), (p + "bo", (d,)),
                   (p + "ln1.g", (d,)), (p + "ln1.b", (d,)),
                   (p + "w1", (d, f)), (p + "b1", (f,)), (p + "w2", (f, d)), (p + "b2", (d,)),
                   (p + "ln2.g", (d,)), (p + "ln2.b", (d,))]
    layout += _head_layout(d, config.n_classes, "cls.")
    layout += [("mlm.w", (d, v)), ("mlm.b", (v,)), ("rtd.w", (d,)), ("rtd.b", (1,))]
    return layout


class EncoderParams(ParamStore):
    def __init__(self, config, flat=None):
        self.config = config
        super().__init__(param_layout(config), flat)

    @classmethod
    def _rebuild(cls, other, flat):
        return EncoderParams(other.config, flat)

    def classifier(self):
        """The classification head as a HeadParams sharing this model's memory."""
        lo, hi = self.span("cls.")
        return HeadParams(self.config.d_model, self.config.n_classes, self.flat[lo:hi])

    def set_classifier(self, head):
        lo, hi = self.span("cls.")
        self.flat[lo:hi] = head.flat


class HeadParams(ParamStore):
    """Classification head: dense(d->d) + tanh + dense(d->n_classes)."""

    def __init__(self, d_model, n_classes, flat=None):
        self.d_model, self.n_classes = d_model, n_classes
        super().__init__(_head_layout(d_model, n_classes), flat)

    @classmethod
    def _rebuild(cls, other, flat):
        return HeadParams(other.d_model, other.n_classes, flat)


def _trunc_normal(rng, shape):
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * INIT_STD


def _init_store(store, rng):
    for name, shape in store.layout:
        if name.endswith(".g"):
            store[name][...] = 1.0
        elif len(shape) == 2:
            store[name][...] = _trunc_normal(rng, shape)
        # biases, rtd.w included below, stay zero unless matrix-shaped
    return store


def init_params(config, rng):
    params = _init_store(EncoderParams(config), rng)
    params["rtd.w"][...] = _trunc_normal(rng, (config.d_model,))
    return params


def init_head(d_model, n_classes, rng):
    return _init_store(HeadParams(d_model, n_classes), rng)


# --------------------------------------------------------------------------
# execution modes


@dataclass(frozen=True)
class Full:
    def blocks(self, n_layers):
        return list(range(1, n_layers + 1))


@dataclass(frozen=True)
class TruncateAt:
    """Run blocks 1..k and feed layer k to the head (k=0: embeddings only)."""

    k: int

    def blocks(self, n_layers):
        if not 0 <= self.k <= n_layers:
            raise InvalidMode(f"TruncateAt({self.k}) outside 0..{n_layers}")
        return list(range(1, self.k + 1))


@dataclass(frozen=True)
class SkipSpan:
    """Bypass blocks first..last (1-based, inclusive); the stream passes through."""

    first: int
    last: int

    def blocks(self, n_layers):
        if not 1 <= self.first <= self.last <= n_layers:
            raise InvalidMode(f"SkipSpan({self.first}, {self.last}) invalid for {n_layers} blocks")
        return [b for b in range(1, n_layers + 1) if not self.first <= b <= self.last]


FULL = Full()


def parse_mode(text):
    """'full', 'truncate:k' or 'skip:i:j'."""
    parts = text.split(":")
    try:
        if parts == ["full"]:
            return FULL
        if parts[0] == "truncate" and len(parts) == 2:
            return TruncateAt(int(parts[1]))
        if parts[0] == "skip" and len(parts) == 3:
            return SkipSpan(int(parts[1]), int(parts[2]))
    except ValueError:
        pass
    raise InvalidMode(f"cannot parse execution mode {text!r}")


# --------------------------------------------------------------------------
# primitives


def _ln_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xm = x - mu
    inv = 1.0 / np.sqrt((xm * xm).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xm * inv
    return xhat * g + b, (xhat, inv)


def _ln_backward(dy, g, cache):
    xhat, inv = cache
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, (dy * xhat).reshape(-1, xhat.shape[-1]).sum(0), dy.reshape(-1, dy.shape[-1]).sum(0)


_GELU_C = np.sqrt(2.0 / np.pi)


def _gelu(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * x * x * x))
    return 0.5 * x * (1.0 + t), t


def _gelu_grad(x, t):
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


def _softmax(s):
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _dropout_mask(rng, shape, rate):
    return (rng.random(shape) >= rate) / (1.0 - rate)


def _rows(a):
    return a.reshape(-1, a.shape[-1])


# --------------------------------------------------------------------------
# forward / backward


@dataclass
class ForwardTrace:
    tokens: np.ndarray
    mode: object
    blocks: list
    states: dict                 # layer index -> (B, T, D) hidden state
    final: np.ndarray
    train: bool
    caches: dict = field(default=None)   # only kept when train=True

    @property
    def cls_state(self):
        return self.final[:, 0, :]


def check_tokens(tokens, config):
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2:
        raise InvalidToken(f"token array must be 1-D or 2-D, got shape {tokens.shape}")
    if tokens.shape[1] > config.max_len:
        raise SequenceTooLong(f"sequence length {tokens.shape[1]} > max_len {config.max_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise InvalidToken(f"token ids must lie in [0, {config.vocab_size})")
    if tokens.size and (tokens == PAD).all(axis=1).any():
        raise InvalidToken("a sequence consists only of PAD tokens")
    return tokens.astype(np.int64, copy=False)


def forward(params, tokens, mode=FULL, train=False, rng=None):
    cfg = params.config
    tokens = check_tokens(tokens, cfg)
    blocks = mode.blocks(cfg.n_layers)
    bsz, seq = tokens.shape
    H, dh = cfg.n_heads, cfg.d_head
    rate = cfg.dropout_rate if train else 0.0
    if rate > 0 and rng is None:
        raise ValueError("dropout during training needs an rng")

    key_bias = np.where(tokens == PAD, -np.inf, 0.0)[:, None, None, :]
    caches = {} if train else None

    e = params["tok_emb"][tokens] + params["pos_emb"][:seq]
    x, ln_cache = _ln_forward(e, params["emb_ln.g"], params["emb_ln.b"])
    m0 = _dropout_mask(rng, x.shape, rate) if rate > 0 else None
    if m0 is not None:
        x = x * m0
    if train:
        caches["emb"] = (ln_cache, m0, key_bias)
    states = {0: x}

    scale = 1.0 / np.sqrt(dh)
    for b in blocks:
        p = f"blocks.{b}."

        def heads(t):
            return t.reshape(bsz, seq, H, dh).transpose(0, 2, 1, 3)

        q = heads(x @ params[p + "wq"] + params[p + "bq"])
        k = heads(x @ params[p + "wk"] + params[p + "bk"])
        v = heads(x @ params[p + "wv"] + params[p + "bv"])
        attn = _softmax(q @ k.transpose(0, 1, 3, 2) * scale + key_bias)
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(bsz, seq, cfg.d_model)
        a = ctx @ params[p + "wo"] + params[p + "bo"]
        m1 = _dropout_mask(rng, a.shape, rate) if rate > 0 else None
        if m1 is not None:
            a = a * m1
        h1, ln1 = _ln_forward(x + a, params[p + "ln1.g"], params[p + "ln1.b"])

        f1 = h1 @ params[p + "w1"] + params[p + "b1"]
        g, t = _gelu(f1)
        f = g @ params[p + "w2"] + params[p + "b2"]
        m2 = _dropout_mask(rng, f.shape, rate) if rate > 0 else None
        if m2 is not None:
            f = f * m2
        out, ln2 = _ln_forward(h1 + f, params[p + "ln2.g"], params[p + "ln2.b"])

        if train:
            caches[b] = (x, q, k, v, attn, ctx, m1, ln1, h1, f1, g, t, m2, ln2)
        x = out
        states[b] = x

    return ForwardTrace(tokens, mode, blocks, states, x, train, caches)


def backward(trace, params, d_final, grads=None):
    """Gradients of a scalar loss given dLoss/d(final hidden states).

    Parameters of blocks the trace's mode did not execute get exactly zero
    gradient.  ``grads`` (same layout as params) is accumulated into when given.
    """
    if not trace.train or trace.caches is None:
        raise ModeMismatch("backward needs a trace produced with train=True")
    cfg = params.config
    if grads is None:
        grads = params.zeros_like()
    d_final = np.asarray(d_final, dtype=np.float64)
    if d_final.shape != trace.final.shape:
        raise DimensionMismatch(f"loss gradient {d_final.shape} vs states {trace.final.shape}")
    bsz, seq = trace.tokens.shape
    H, dh, D = cfg.n_heads, cfg.d_head, cfg.d_model
    scale = 1.0 / np.sqrt(dh)

    dx = d_final
    for b in reversed(trace.blocks):
        p = f"blocks.{b}."
        x, q, k, v, attn, ctx, m1, ln1, h1, f1, g, t, m2, ln2 = trace.caches[b]

        dres2, dg2, db2 = _ln_backward(dx, params[p + "ln2.g"], ln2)
        grads[p + "ln2.g"] += dg2
        grads[p + "ln2.b"] += db2
        df = dres2 * m2 if m2 is not None else dres2
        grads[p + "w2"] += _rows(g).T @ _rows(df)
        grads[p + "b2"] += _rows(df).sum(0)
        df1 = (df @ params[p + "w2"].T) * _gelu_grad(f1, t)
        grads[p + "w1"] += _rows(h1).T @ _rows(df1)
        grads[p + "b1"] += _rows(df1).sum(0)
        dh1 = dres2 + df1 @ params[p + "w1"].T

        dres1, dg1, db1 = _ln_backward(dh1, params[p + "ln1.g"], ln1)
        grads[p + "ln1.g"] += dg1
        grads[p + "ln1.b"] += db1
        da = dres1 * m1 if m1 is not None else dres1
        grads[p + "wo"] += _rows(ctx).T @ _rows(da)
        grads[p + "bo"] += _rows(da).sum(0)
        dctx = (da @ params[p + "wo"].T).reshape(bsz, seq, H, dh).transpose(0, 2, 1, 3)
        dattn = dctx @ v.transpose(0, 1, 3, 2)
        dv = attn.transpose(0, 1, 3, 2) @ dctx
        ds = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q

        dx = dres1
        for name, dt in (("q", dq), ("k", dk), ("v", dv)):
            dt = dt.transpose(0, 2, 1, 3).reshape(bsz, seq, D)
            grads[p + "w" + name] += _rows(x).T @ _rows(dt)
            grads[p + "b" + name] += _rows(dt).sum(0)
            dx = dx + dt @ params[p + "w" + name].T

    ln_cache, m0, _ = trace.caches["emb"]
    if m0 is not None:
        dx = dx * m0
    de, dge, dbe = _ln_backward(dx, params["emb_ln.g"], ln_cache)
    grads["emb_ln.g"] += dge
    grads["emb_ln.b"] += dbe
    np.add.at(grads["tok_emb"], trace.tokens, de)
    grads["pos_emb"][:seq] += de.sum(0)
    return grads


EVAL_CHUNK = 256


def cls_states(params, tokens, mode=FULL, all_layers=False):
    """CLS hidden states for every row of ``tokens``, dropout off.

    Rows are always processed in chunks of EVAL_CHUNK so extraction and
    evaluation see bit-identical values.  With ``all_layers`` a dict
    {layer index: (N, d)} over the executed layers is returned instead of
    the final (N, d) state.
    """
    tokens = check_tokens(tokens, params.config)
    parts = []
    for lo in range(0, len(tokens), EVAL_CHUNK):
        trace = forward(params, tokens[lo:lo + EVAL_CHUNK], mode)
        if all_layers:
            parts.append({k: s[:, 0, :] for k, s in trace.states.items()})
        else:
            parts.append(trace.cls_state)
    if not all_layers:
        return np.concatenate(parts) if parts else np.zeros((0, params.config.d_model))
    return {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}


# --------------------------------------------------------------------------
# heads


def head_forward(head, cls_state, return_cache=False):
    cls_state = np.asarray(cls_state, dtype=np.float64)
    if cls_state.shape[-1] != head.d_model:
        raise DimensionMismatch(f"CLS state has dim {cls_state.shape[-1]}, head expects {head.d_model}")
    z = np.tanh(cls_state @ head["w1"] + head["b1"])
    logits = z @ head["w2"] + head["b2"]
    if return_cache:
        return logits, (cls_state, z)
    return logits


def head_backward(head, cache, dlogits, head_grads):
    """Accumulate head gradients and return dLoss/d(cls_state)."""
    c, z = cache
    head_grads["w2"] += _rows(z).T @ _rows(dlogits)
    head_grads["b2"] += _rows(dlogits).sum(0)
    dpre = (dlogits @ head["w2"].T) * (1.0 - z * z)
    head_grads["w1"] += _rows(c).T @ _rows(dpre)
    head_grads["b1"] += _rows(dpre).sum(0)
    return dpre @ head["w1"].T


def mlm_logits(params, hidden):
    return hidden @ params["mlm.w"] + params["mlm.b"]


def rtd_logits(params, hidden):
    return hidden @ params["rtd.w"] + params["rtd.b"][0]


# --------------------------------------------------------------------------
# checkpoint files
#
# layout (little-endian): b"ENCK", u32 version, u32 vocab_size, max_len,
# d_model, n_heads, n_layers, d_ff, n_classes, f64 dropout_rate, u64 count,
# count f64 parameters in param_layout order, 32-byte sha256 of all
# preceding bytes.  Head files use b"ENCH" with u32 d_model, n_classes.

CKPT_MAGIC = b"ENCK"
HEAD_MAGIC = b"ENCH"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIIIIIIIIdQ")
_HEAD_HEADER = struct.Struct("<4sIIIQ")


def atomic_write_bytes(path, data):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _seal(body):
    return body + hashlib.sha256(body).digest()


def _unseal(raw, path):
    if len(raw) < 32:
        raise FormatError(f"{path}: file too short")
    body, trailer = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != trailer:
        raise FormatError(f"{path}: digest trailer mismatch (corrupted or truncated)")
    return body


def _read_payload(body, offset, count, path):
    need = offset + 8 * count
    if len(body) != need:
        raise FormatError(f"{path}: expected {need} bytes before trailer, found {len(body)}")
    flat = np.frombuffer(body, dtype="<f8", count=count, offset=offset).astype(np.float64)
    if not np.isfinite(flat).all():
        raise FormatError(f"{path}: non-finite parameter values")
    return flat


def checkpoint_bytes(params):
    c = params.config
    header = _CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, c.vocab_size, c.max_len, c.d_model,
                               c.n_heads, c.n_layers, c.d_ff, c.n_classes, c.dropout_rate,
                               params.flat.size)
    return _seal(header + params.flat.astype("<f8").tobytes())


def write_checkpoint(params, path):
    atomic_write_bytes(path, checkpoint_bytes(params))


def read_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {CKPT_MAGIC!r}")
    body = _unseal(raw, path)
    if len(body) < _CKPT_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    _, version, *dims, dropout, count = _CKPT_HEADER.unpack_from(body)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        config = EncoderConfig(*dims[:6], dropout_rate=dropout, n_classes=dims[6])
    except ConfigError as exc:
        raise FormatError(f"{path}: invalid config in header: {exc}") from None
    params = EncoderParams(config)
    if count != params.flat.size:
        raise FormatError(f"{path}: parameter count {count} does not match config")
    params.flat = _read_payload(body, _CKPT_HEADER.size, count, path)
    return params


def head_bytes(head):
    header = _HEAD_HEADER.pack(HEAD_MAGIC, CKPT_VERSION, head.d_model, head.n_classes, head.flat.size)
    return _seal(header + head.flat.astype("<f8").tobytes())


def write_head(head, path):
    atomic_write_bytes(path, head_bytes(head))


def read_head(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != HEAD_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {HEAD_MAGIC!r}")
    body = _unseal(raw, path)
    if len(body) < _HEAD_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    _, version, d_model, n_classes, count = _HEAD_HEADER.unpack_from(body)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported head version {version}")
    head = HeadParams(d_model, n_classes)
    if count != head.flat.size:
        raise FormatError(f"{path}: parameter count {count} does not match head shape")
    head.flat = _read_payload(body, _HEAD_HEADER.size, count, path)
    return head


def config_dict(config):
    return asdict(config)


def config_json(config):
    return json.dumps(asdict(config), sort_keys=True)
