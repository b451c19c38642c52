"""Binary checkpoint files.

Layout: an 8-byte magic, a little-endian uint32 header length, a JSON
header (model config, epoch, value count, extra metadata, sha256 digest),
then the raw little-endian float64 parameter values. The digest covers the
header without its digest field plus the value bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .nn import ModelConfig, ParamVector

MAGIC = b"ULCKPT1\n"


class CheckpointError(ValueError):
    pass


def _digest(header: dict, payload: bytes) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(header, sort_keys=True).encode())
    h.update(payload)
    return h.hexdigest()


def dumps_checkpoint(w: ParamVector, epoch: int = 0, meta: dict | None = None) -> bytes:
    payload = w.values.astype("<f8").tobytes()
    header = {"config": w.config.to_dict(), "epoch": int(epoch), "count": int(w.values.size), "meta": meta or {}}
    header["sha256"] = _digest(header, payload)
    blob = json.dumps(header, sort_keys=True).encode()
    return MAGIC + struct.pack("<I", len(blob)) + blob + payload


def save_checkpoint(path: str | Path, w: ParamVector, epoch: int = 0, meta: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps_checkpoint(w, epoch, meta))
    tmp.replace(path)


def loads_checkpoint(raw: bytes) -> tuple[ParamVector, int, dict]:
    if not raw.startswith(MAGIC):
        raise CheckpointError("not a checkpoint file (bad magic)")
    try:
        (n,) = struct.unpack_from("<I", raw, len(MAGIC))
        start = len(MAGIC) + 4
        header = json.loads(raw[start : start + n])
    except (struct.error, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    payload = raw[start + n :]
    digest = header.pop("sha256", None)
    if digest is None or _digest(header, payload) != digest:
        raise CheckpointError("checkpoint digest mismatch (truncated or corrupted file)")
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    if values.size != header["count"]:
        raise CheckpointError("value count does not match header")
    config = ModelConfig.from_dict(header["config"])
    return ParamVector(values, config), int(header["epoch"]), header.get("meta", {})


def load_checkpoint(path: str | Path, expect_input_dim: int | None = None, expect_classes: int | None = None) -> ParamVector:
    w, _, _ = load_checkpoint_full(path)
    if expect_input_dim is not None and w.config.input_dim != expect_input_dim:
        raise CheckpointError(
            f"{path}: checkpoint expects input dimension {w.config.input_dim}, data has {expect_input_dim}"
        )
    if expect_classes is not None and w.config.num_classes != expect_classes:
        raise CheckpointError(f"{path}: checkpoint has {w.config.num_classes} classes, data has {expect_classes}")
    return w


def load_checkpoint_full(path: str | Path) -> tuple[ParamVector, int, dict]:
    return loads_checkpoint(Path(path).read_bytes())
