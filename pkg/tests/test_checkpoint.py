import json

import numpy as np
import pytest

from vit5 import checkpoint as ckpt
from vit5 import model as M
from vit5.config import ModelConfig, count_parameter_groups


@pytest.fixture
def saved(tmp_path):
    m = M.build(ModelConfig(), 4)
    m.params["head.weight"].data[:] = np.random.default_rng(0).normal(size=(64, 4))
    return m, ckpt.save(m, tmp_path / "ck")


def test_roundtrip_logits_identical(saved):
    m, path = saved
    probe = np.random.default_rng(1).uniform(size=(4, 1, 32, 32)).astype(np.float32)
    a = M.forward(m, probe).data
    b = M.forward(ckpt.load(path), probe).data
    assert np.abs(a - b).max() == 0


def test_save_load_save_bytes(saved, tmp_path):
    _, path = saved
    again = ckpt.save(ckpt.load(path), tmp_path / "again")
    for name in (ckpt.MANIFEST, ckpt.BLOB):
        assert (path / name).read_bytes() == (again / name).read_bytes()


def test_manifest_group_count(saved):
    m, path = saved
    manifest = json.loads((path / ckpt.MANIFEST).read_text())
    assert manifest["format"] == "vit5-ckpt/1"
    assert len(manifest["tensors"]) == count_parameter_groups(m.config)


def test_flipped_byte_is_hash_error(saved):
    _, path = saved
    blob = bytearray((path / ckpt.BLOB).read_bytes())
    blob[17] ^= 0xFF
    (path / ckpt.BLOB).write_bytes(bytes(blob))
    with pytest.raises(ckpt.CheckpointHashError):
        ckpt.load(path)


def test_truncated_blob(saved):
    _, path = saved
    (path / ckpt.BLOB).write_bytes((path / ckpt.BLOB).read_bytes()[:-8])
    with pytest.raises(ckpt.CheckpointTruncatedError):
        ckpt.load(path)


def test_version_mismatch(saved):
    _, path = saved
    doc = json.loads((path / ckpt.MANIFEST).read_text())
    doc["format"] = "vit5-ckpt/0"
    (path / ckpt.MANIFEST).write_text(json.dumps(doc))
    with pytest.raises(ckpt.CheckpointVersionError):
        ckpt.load(path)


def test_manifest_tamper(saved):
    _, path = saved
    doc = json.loads((path / ckpt.MANIFEST).read_text())
    doc["seed"] = 99
    (path / ckpt.MANIFEST).write_text(json.dumps(doc))
    with pytest.raises(ckpt.CheckpointHashError):
        ckpt.load(path)


def test_errors_are_distinct():
    kinds = {ckpt.CheckpointVersionError, ckpt.CheckpointHashError, ckpt.CheckpointTruncatedError}
    assert len(kinds) == 3
    assert not issubclass(ckpt.CheckpointTruncatedError, ckpt.CheckpointHashError)


def test_blob_is_little_endian_f32(saved):
    m, path = saved
    manifest = json.loads((path / ckpt.MANIFEST).read_text())
    entry = next(e for e in manifest["tensors"] if e["name"] == "head.weight")
    raw = np.frombuffer((path / ckpt.BLOB).read_bytes(), dtype="<f4", count=64 * 4, offset=entry["offset"])
    assert np.array_equal(raw.reshape(64, 4), m.params["head.weight"].data)


def test_garbled_manifest_is_checkpoint_error(saved):
    _, path = saved
    (path / ckpt.MANIFEST).write_text("{garbled")
    with pytest.raises(ckpt.CheckpointError):
        ckpt.load(path)
