import json
import struct

import numpy as np
import pytest

from layercka import activations as act
from layercka import encoder as enc
from layercka import tasks
from layercka.errors import EmptyDataset, FormatError

CFG = enc.EncoderConfig(vocab_size=40, max_len=18, d_model=8, n_heads=2, n_layers=3, d_ff=16)


@pytest.fixture(scope="module")
def acts():
    params = enc.init_params(CFG, np.random.default_rng(0))
    _, val = tasks.gen_task(tasks.TaskSpec("parity", n_train=10, n_validation=40, seq_len=12), 40)
    return params, val, act.extract_cls(params, val, "orig")


def test_extract_shapes(acts):
    params, val, a = acts
    assert a.layer_count == 3 and a.n_examples == 40 and a.dim == 8
    np.testing.assert_array_equal(a.layers[3], enc.cls_states(params, val.tokens))
    assert a.manifest.example_ids == tuple(val.ids)
    assert a.manifest_hash == a.manifest.hash


def test_extract_cap(acts):
    params, val, _ = acts
    a = act.extract_cls(params, val, max_examples=16)
    assert a.n_examples == 16 and a.manifest.example_ids == tuple(val.ids[:16])
    with pytest.raises(EmptyDataset):
        act.extract_cls(params, val.take(0))


def test_manifest_hash_is_sha256_prefix():
    import hashlib
    m = act.Manifest("parity", "validation", (3, 1, 2), {"width": 5}, 7)
    text = json.dumps({"example_ids": [3, 1, 2], "seed": 7, "split": "validation",
                       "task": "parity", "tokenization": {"width": 5}},
                      sort_keys=True, separators=(",", ":"))
    assert m.canonical() == text
    assert m.hash == int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")
    with pytest.raises(ValueError):
        act.Manifest("t", "s", (1, 1))


def test_binary_layout(acts, tmp_path):
    _, _, a = acts
    path = tmp_path / "a.actv"
    act.write_activations(a, path)
    raw = path.read_bytes()
    magic, version, L, n, d, h = struct.unpack_from("<4sIIIIQ", raw)
    assert (magic, version, L, n, d, h) == (b"ACTV", 1, 3, 40, 8, a.manifest_hash)
    assert len(raw) == 28 + 4 * 4 * 40 * 8
    vals = np.frombuffer(raw, "<f4", offset=28).reshape(4, 40, 8)
    np.testing.assert_array_equal(vals[2], a.layers[2].astype(np.float32))
    side = json.loads((tmp_path / "a.manifest.json").read_text())
    assert side["model_label"] == "orig" and side["manifest"]["task"] == "parity"


def test_roundtrip_byte_identical(acts, tmp_path):
    _, _, a = acts
    act.write_activations(a, tmp_path / "a.actv")
    b = act.read_activations(tmp_path / "a.actv")
    act.write_activations(b, tmp_path / "b.actv")
    assert (tmp_path / "a.actv").read_bytes() == (tmp_path / "b.actv").read_bytes()
    assert b.model_label == "orig" and b.manifest == a.manifest


def _corrupt(tmp_path, a, how):
    act.write_activations(a, tmp_path / "x.actv")
    p = tmp_path / "x.actv"
    raw = bytearray(p.read_bytes())
    if how == "magic":
        raw[:4] = b"ACTX"
    elif how == "version":
        raw[4] = 9
    elif how == "truncate":
        raw = raw[:28 + 4 * 40 * 8 * 2 + 10]
    elif how == "trailing":
        raw += b"\0\0\0\0"
    elif how == "nan":
        raw[40:44] = struct.pack("<f", float("nan"))
    elif how == "header":
        raw = raw[:20]
    elif how == "hash":
        raw[24] ^= 0xFF
    p.write_bytes(bytes(raw))
    return p


@pytest.mark.parametrize("how", ["magic", "version", "truncate", "trailing", "nan", "header", "hash"])
def test_corruption_raises(acts, tmp_path, how):
    _, _, a = acts
    with pytest.raises(FormatError):
        act.read_activations(_corrupt(tmp_path, a, how))


def test_truncation_names_layer(acts, tmp_path):
    _, _, a = acts
    with pytest.raises(FormatError, match="layer 2"):
        act.read_activations(_corrupt(tmp_path, a, "truncate"))


def test_missing_sidecar_falls_back_to_stem(acts, tmp_path):
    _, _, a = acts
    act.write_activations(a, tmp_path / "m.actv")
    (tmp_path / "m.manifest.json").unlink()
    b = act.read_activations(tmp_path / "m.actv")
    assert b.model_label == "m" and b.manifest is None and b.manifest_hash == a.manifest_hash
