import json
import struct

import numpy as np
import pytest

from backend.checkpoint import (BadMagicError, Checkpoint, HeaderError, Provenance, ShapeMismatchError,
                                TruncatedDataError, UnsupportedVersionError, checkpoints_equal, from_bytes, load,
                                read_header, save, to_bytes)
from backend.testing import TINY, make_checkpoint
from backend.transformer import ModelConfig, param_shapes

GOLDEN_NAMES = ["embed.tok", "embed.pos",
                "L0.ln1.g", "L0.ln1.b", "L0.attn.wq", "L0.attn.wk", "L0.attn.wv", "L0.attn.wo",
                "L0.attn.bq", "L0.attn.bk", "L0.attn.bv", "L0.attn.bo", "L0.ln2.g", "L0.ln2.b",
                "L0.ffn.w1", "L0.ffn.b1", "L0.ffn.w2", "L0.ffn.b2", "final.ln.g", "final.ln.b"]


def golden_checkpoint():
    config = ModelConfig(1, 1, 1, 1, 1, 1, 1)
    params = {n: np.full(s, 0.5, dtype=np.float32) for n, s in param_shapes(config).items()}
    return Checkpoint(config, params, Provenance(name="golden", seed=7))


def golden_bytes():
    shapes = {n: [1] if n.endswith((".g", ".b", ".bq", ".bk", ".bv", ".bo", ".b1", ".b2")) else [1, 1]
              for n in GOLDEN_NAMES}
    entries = ",".join(
        f'{{"byte_len":4,"byte_offset":{8 * i},"dtype":"f32","name":"{n}","shape":{shapes[n]}}}'.replace(" ", "")
        for i, n in enumerate(GOLDEN_NAMES))
    header = ('{"config":{"d_ff":1,"d_model":1,"head_dim":1,"max_seq_len":1,"n_heads":1,"n_layers":1,'
              '"tied_lm_head":true,"vocab_size":1},'
              '"meta":{"lineage":[],"name":"golden","seed":7,"step":0},'
              f'"tensors":[{entries}]}}').encode("utf-8")
    payload = (struct.pack("<f", 0.5) + b"\x00" * 4) * len(GOLDEN_NAMES)
    return b"CBDC" + struct.pack("<I", 1) + struct.pack("<Q", len(header)) + header + payload


def test_golden_bytes():
    assert to_bytes(golden_checkpoint()) == golden_bytes()


def test_golden_bytes_load():
    ckpt = from_bytes(golden_bytes())
    assert ckpt.name == "golden" and ckpt.meta.seed == 7
    assert list(ckpt.params) == GOLDEN_NAMES
    assert all(arr.dtype == np.float32 and arr.reshape(-1)[0] == 0.5 for arr in ckpt.params.values())


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_save_load_roundtrip(tmp_path, dtype):
    ckpt = make_checkpoint(TINY, seed=4, name="roundtrip", dtype=dtype)
    ckpt.meta = ckpt.meta.with_stage("random-init", seed=4)
    path = str(tmp_path / "a.cbdc")
    save(ckpt, path)
    loaded = load(path)
    assert checkpoints_equal(ckpt, loaded)
    assert loaded.dtype == dtype


def test_same_checkpoint_same_bytes(tmp_path):
    ckpt = make_checkpoint(TINY, seed=2)
    save(ckpt, str(tmp_path / "a.cbdc"))
    save(make_checkpoint(TINY, seed=2), str(tmp_path / "b.cbdc"))
    assert (tmp_path / "a.cbdc").read_bytes() == (tmp_path / "b.cbdc").read_bytes()
    assert not (tmp_path / "a.cbdc.tmp").exists()


def test_params_are_stored_in_canonical_order():
    ckpt = make_checkpoint(TINY, seed=0)
    shuffled = Checkpoint(TINY, dict(reversed(list(ckpt.params.items()))), ckpt.meta)
    assert to_bytes(shuffled) == to_bytes(ckpt)


def test_read_header(tmp_path):
    ckpt = make_checkpoint(TINY, seed=0, name="head")
    path = str(tmp_path / "h.cbdc")
    save(ckpt, path)
    header = read_header(path)
    assert header["meta"]["name"] == "head"
    assert ModelConfig.from_dict(header["config"]) == TINY
    assert [t["name"] for t in header["tensors"]] == list(param_shapes(TINY))
    assert all(t["byte_offset"] % 8 == 0 for t in header["tensors"])


def test_bad_magic():
    buf = bytearray(golden_bytes())
    buf[:4] = b"GGUF"
    with pytest.raises(BadMagicError):
        from_bytes(bytes(buf))


def test_unsupported_version():
    buf = bytearray(golden_bytes())
    buf[4:8] = struct.pack("<I", 2)
    with pytest.raises(UnsupportedVersionError):
        from_bytes(bytes(buf))


@pytest.mark.parametrize("cut", [10, 40, -5])
def test_truncated(cut):
    with pytest.raises(TruncatedDataError):
        from_bytes(golden_bytes()[:cut])


def test_shape_mismatch():
    ckpt = golden_checkpoint()
    bad = golden_bytes().replace(b'"vocab_size":1', b'"vocab_size":2')
    assert bad != to_bytes(ckpt)
    with pytest.raises(ShapeMismatchError):
        from_bytes(bad)


def test_unreadable_header():
    buf = golden_bytes()
    header_len = struct.unpack_from("<Q", buf, 8)[0]
    broken = buf[:16] + b"{" * header_len + buf[16 + header_len:]
    with pytest.raises(HeaderError):
        from_bytes(broken)


def with_header(buf, edit):
    """Re-encode buf with its JSON header changed by edit(header)"""
    header_len = struct.unpack_from("<Q", buf, 8)[0]
    header = json.loads(buf[16:16 + header_len])
    edit(header)
    text = json.dumps(header).encode("utf-8")
    return buf[:8] + struct.pack("<Q", len(text)) + text + buf[16 + header_len:]


def drop_key(key):
    return lambda h: h["tensors"][0].pop(key)


def set_key(key, value):
    return lambda h: h["tensors"][0].update({key: value})


@pytest.mark.parametrize("edit", [
    drop_key("byte_len"), drop_key("name"), drop_key("shape"),
    set_key("shape", "1x1"), set_key("shape", [1, -1]), set_key("byte_offset", -8), set_key("byte_len", 4.0),
    set_key("dtype", ["f32"]), set_key("name", 3),
    lambda h: h.update({"tensors": {"embed.tok": 0}}), lambda h: h.update({"meta": []}),
])
def test_malformed_tensor_table(edit):
    buf = to_bytes(make_checkpoint(TINY))
    with pytest.raises(HeaderError):
        from_bytes(with_header(buf, edit))


def test_malformed_tensor_table_from_file(tmp_path):
    path = tmp_path / "broken.cbdc"
    path.write_bytes(with_header(to_bytes(make_checkpoint(TINY)), drop_key("byte_len")))
    with pytest.raises(HeaderError):
        load(str(path))


def test_to_bytes_validates_shapes():
    ckpt = make_checkpoint(TINY, seed=0)
    ckpt.params["L0.ffn.w1"] = np.zeros((2, 2), dtype=np.float32)
    with pytest.raises(ShapeMismatchError):
        to_bytes(ckpt)


def test_provenance_with_stage_appends():
    meta = Provenance(name="a", seed=1)
    staged = meta.with_stage("trained:ce", name="b", step=10, lr=0.01)
    assert meta.lineage == []
    assert staged.lineage == [{"stage": "trained:ce", "lr": 0.01}]
    assert (staged.name, staged.seed, staged.step) == ("b", 1, 10)
    assert Provenance.from_dict(staged.to_dict()) == staged
