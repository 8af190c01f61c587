"""Per-layer CLS activations and the ``.actv`` interchange format.

Binary layout (little-endian)::

    b"ACTV"            4 bytes
    version            u32   (currently 1)
    layer_count        u32   L; layers 0..L are stored, so L + 1 matrices
    n                  u32   examples per layer
    d                  u32   hidden size
    manifest_hash      u64
    values             (L + 1) * n * d float32, layer-major, row-major

A sidecar ``<stem>.manifest.json`` holds the example-set manifest in
canonical (sorted-key) JSON plus the model label.  ``manifest_hash`` is the
first 8 bytes (little-endian) of the SHA-256 of the canonical manifest.
"""
import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import encoder as enc
from .errors import EmptyDataset, FormatError

MAGIC = b"ACTV"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIQ")
DEFAULT_MAX_EXAMPLES = 2048


@dataclass(frozen=True)
class Manifest:
    task: str
    split: str
    example_ids: tuple
    tokenization: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        ids = tuple(int(i) for i in self.example_ids)
        if len(set(ids)) != len(ids):
            raise ValueError("manifest example ids must be unique")
        object.__setattr__(self, "example_ids", ids)

    def canonical(self):
        d = asdict(self)
        d["example_ids"] = list(self.example_ids)
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @property
    def hash(self):
        return int.from_bytes(hashlib.sha256(self.canonical().encode()).digest()[:8], "little")

    @classmethod
    def from_dict(cls, d):
        return cls(d["task"], d["split"], tuple(d["example_ids"]), dict(d.get("tokenization", {})),
                   int(d.get("seed", 0)))


def manifest_for(dataset, config):
    return Manifest(dataset.name, dataset.split, tuple(dataset.ids.tolist()),
                    {"max_len": config.max_len, "vocab_size": config.vocab_size,
                     "width": int(dataset.tokens.shape[1])},
                    dataset.seed)


@dataclass
class ActivationSet:
    model_label: str
    layers: list                 # layer 0 (embeddings) .. layer L, each (N, d) float64
    manifest_hash: int
    manifest: Manifest = None

    def __post_init__(self):
        if not self.layers:
            raise ValueError("an activation set needs at least layer 0")
        n = self.layers[0].shape[0]
        if any(m.ndim != 2 or m.shape[0] != n for m in self.layers):
            raise ValueError("all layers must be 2-D with the same number of rows")

    @property
    def layer_count(self):
        return len(self.layers) - 1

    @property
    def n_examples(self):
        return self.layers[0].shape[0]

    @property
    def dim(self):
        return self.layers[0].shape[1]


def extract_cls(params, dataset, label="model", max_examples=DEFAULT_MAX_EXAMPLES):
    """CLS state after the embeddings and after every block, dropout off."""
    if len(dataset) == 0:
        raise EmptyDataset("cannot extract activations from an empty dataset")
    if max_examples is not None and len(dataset) > max_examples:
        dataset = dataset.take(max_examples)
    states = enc.cls_states(params, dataset.tokens, enc.FULL, all_layers=True)
    manifest = manifest_for(dataset, params.config)
    layers = [states[k] for k in range(params.config.n_layers + 1)]
    return ActivationSet(label, layers, manifest.hash, manifest)


def activation_bytes(acts):
    header = _HEADER.pack(MAGIC, VERSION, acts.layer_count, acts.n_examples, acts.dim,
                          acts.manifest_hash)
    body = np.stack(acts.layers).astype("<f4").tobytes()
    return header + body


def sidecar_path(path):
    root, ext = os.path.splitext(os.fspath(path))
    return root + ".manifest.json"


def sidecar_json(acts):
    doc = {"model_label": acts.model_label,
           "manifest": None if acts.manifest is None else json.loads(acts.manifest.canonical())}
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def write_activations(acts, path):
    enc.atomic_write_bytes(path, activation_bytes(acts))
    enc.atomic_write_bytes(sidecar_path(path), sidecar_json(acts).encode())


def read_activations(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    _, version, layer_count, n, d, mhash = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    per_layer = n * d * 4
    payload = len(raw) - _HEADER.size
    expected = (layer_count + 1) * per_layer
    if payload < expected:
        bad = payload // per_layer if per_layer else 0
        raise FormatError(f"{path}: truncated in layer {bad} "
                          f"({payload} of {expected} payload bytes present)")
    if payload > expected:
        raise FormatError(f"{path}: {payload - expected} trailing bytes after layer {layer_count}")
    values = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(layer_count + 1, n, d)
    if not np.isfinite(values).all():
        raise FormatError(f"{path}: non-finite activation values")
    layers = [values[i].astype(np.float64) for i in range(layer_count + 1)]

    label, manifest = os.path.splitext(os.path.basename(path))[0], None
    side = sidecar_path(path)
    if os.path.exists(side):
        try:
            with open(side) as fh:
                doc = json.load(fh)
            label = doc.get("model_label", label)
            if doc.get("manifest") is not None:
                manifest = Manifest.from_dict(doc["manifest"])
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"{side}: malformed manifest sidecar ({exc})") from None
        if manifest is not None and manifest.hash != mhash:
            raise FormatError(f"{side}: manifest hash does not match {path}")
    return ActivationSet(label, layers, mhash, manifest)
