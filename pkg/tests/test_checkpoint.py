import json

import numpy as np
import pytest

from mgcl.checkpoint import (
    CHECKPOINT_FORMAT_VERSION,
    checkpoint_name,
    load_checkpoint,
    save_checkpoint,
)
from mgcl.errors import CheckpointCorruptError, CheckpointVersionError


def sample_arrays():
    rng = np.random.default_rng(0)
    return {
        "online/w": rng.normal(size=(4, 3)).astype(np.float32),
        "step": np.array([7], dtype=np.int64),
    }


def test_name_pattern():
    assert checkpoint_name(0) == "ckpt_00000000"
    assert checkpoint_name(1234) == "ckpt_00001234"


def test_roundtrip(tmp_path):
    path = tmp_path / checkpoint_name(7)
    arrays = sample_arrays()
    save_checkpoint(path, arrays, {"config_hash": "abc", "step": 7})
    loaded, meta = load_checkpoint(path)
    assert set(loaded) == set(arrays)
    for k in arrays:
        assert np.array_equal(loaded[k], arrays[k])
    assert meta["config_hash"] == "abc"
    assert meta["step"] == 7
    assert meta["format_version"] == CHECKPOINT_FORMAT_VERSION


def test_corruption_detected(tmp_path):
    path = tmp_path / checkpoint_name(1)
    save_checkpoint(path, sample_arrays(), {"step": 1})
    blob = bytearray(path.read_bytes())
    # flip a byte inside the first stored array's data region
    idx = len(blob) // 2
    blob[idx] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointCorruptError):
        load_checkpoint(path)


def test_version_mismatch_reports_both_versions(tmp_path):
    path = tmp_path / checkpoint_name(2)
    save_checkpoint(path, sample_arrays(), {"step": 2})
    # rewrite the embedded meta with a future version
    with np.load(path, allow_pickle=False) as npz:
        payload = {k: npz[k] for k in npz.files}
    meta = json.loads(payload.pop("__meta__").tobytes().decode())
    meta["format_version"] = 99
    payload["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    import io

    buf = io.BytesIO()
    np.savez(buf, **payload)
    path.write_bytes(buf.getvalue())
    with pytest.raises(CheckpointVersionError) as err:
        load_checkpoint(path)
    assert "99" in str(err.value) and str(CHECKPOINT_FORMAT_VERSION) in str(err.value)


def test_truncated_file(tmp_path):
    path = tmp_path / checkpoint_name(3)
    save_checkpoint(path, sample_arrays(), {"step": 3})
    path.write_bytes(path.read_bytes()[:40])
    with pytest.raises(CheckpointCorruptError):
        load_checkpoint(path)
