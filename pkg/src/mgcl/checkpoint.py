"""Self-describing checkpoint files.

A checkpoint is an uncompressed npz archive of named float/int arrays plus
a `__meta__` JSON record carrying the format version, the resolved config
text and its hash, the step count, and a sha256 over every array's bytes.
Files are named exactly `ckpt_{step:08d}` (npz payload, no extension).
"""

from __future__ import annotations

import hashlib
import io
import json
from pathlib import Path

import numpy as np

from .errors import CheckpointCorruptError, CheckpointVersionError

CHECKPOINT_FORMAT_VERSION = 1


def checkpoint_name(step: int) -> str:
    return f"ckpt_{step:08d}"


def _digest(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], meta: dict) -> Path:
    path = Path(path)
    full_meta = dict(meta)
    full_meta["format_version"] = CHECKPOINT_FORMAT_VERSION
    full_meta["checksum"] = _digest(arrays)
    payload = dict(arrays)
    payload["__meta__"] = np.frombuffer(
        json.dumps(full_meta, sort_keys=True).encode(), dtype=np.uint8
    )
    buf = io.BytesIO()
    np.savez(buf, **payload)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as npz:
            payload = {name: npz[name] for name in npz.files}
    except Exception as exc:
        raise CheckpointCorruptError(
            f"checkpoint {path} failed checksum or read verification: {exc}"
        ) from exc
    if "__meta__" not in payload:
        raise CheckpointCorruptError(f"checkpoint {path} has no metadata record")
    meta = json.loads(payload.pop("__meta__").tobytes().decode())
    version = meta.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint {path} has format version {version}, "
            f"this build reads version {CHECKPOINT_FORMAT_VERSION}"
        )
    expected = meta.get("checksum")
    actual = _digest(payload)
    if actual != expected:
        raise CheckpointCorruptError(
            f"checkpoint {path} checksum mismatch: stored {expected}, computed {actual}"
        )
    return payload, meta
