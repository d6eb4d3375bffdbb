"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    b"REHT" u8 version
    per record: u32 name_len, name (UTF-8), u8 dtype (0=f32, 1=f64), u8 rank,
                u32 dims[rank], raw little-endian data
    u64 record_count

The model config lives next to the checkpoint as ``<path>.json``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, ReHiTModel, build_model
from .nn import Module

MAGIC = b"REHT"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointError(ValueError):
    pass


def encode(records: list[tuple[str, np.ndarray]]) -> bytes:
    parts = [MAGIC, struct.pack("<B", VERSION)]
    for name, arr in records:
        arr = np.asarray(arr)
        tag = _TAGS.get(arr.dtype)
        if tag is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<BB", tag, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    parts.append(struct.pack("<Q", len(records)))
    return b"".join(parts)


def decode(blob: bytes) -> list[tuple[str, np.ndarray]]:
    if blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    if len(blob) < 13:
        raise CheckpointError("truncated checkpoint")
    if blob[4] != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {blob[4]} (expected {VERSION})")
    (count,) = struct.unpack_from("<Q", blob, len(blob) - 8)
    end, pos, records = len(blob) - 8, 5, []
    try:
        while pos < end:
            (n,) = struct.unpack_from("<I", blob, pos)
            name = blob[pos + 4:pos + 4 + n].decode("utf-8")
            pos += 4 + n
            tag, rank = struct.unpack_from("<BB", blob, pos)
            if tag not in _DTYPES:
                raise CheckpointError(f"{name}: unknown dtype tag {tag}")
            shape = struct.unpack_from(f"<{rank}I", blob, pos + 2)
            pos += 2 + 4 * rank
            size = int(np.prod(shape, dtype=np.int64)) * _DTYPES[tag].itemsize
            if pos + size > end:
                raise CheckpointError(f"{name}: data runs past end of file")
            arr = np.frombuffer(blob, _DTYPES[tag], int(np.prod(shape, dtype=np.int64)), pos)
            records.append((name, arr.reshape(shape).copy()))
            pos += size
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    if len(records) != count:
        raise CheckpointError(f"record count mismatch: trailer says {count}, found {len(records)}")
    return records


def config_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".json")


def save_checkpoint(model: Module, path, config: ModelConfig | None = None) -> None:
    Path(path).write_bytes(encode([(n, p.data) for n, p in model.named_parameters()]))
    if config is not None:
        config_path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")


def load_into(model: Module, path) -> None:
    """Copy checkpoint values into ``model``; names and shapes must match exactly."""
    try:
        records = dict(decode(Path(path).read_bytes()))
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    params = dict(model.named_parameters())
    if set(records) != set(params):
        diff = sorted(set(records) ^ set(params))
        raise CheckpointError(f"parameter names differ from the model: {diff[:5]}")
    for name, p in params.items():
        arr = records[name]
        if arr.shape != p.data.shape:
            raise CheckpointError(f"{name}: checkpoint shape {arr.shape} vs model {p.data.shape}")
        p.data = arr.astype(p.data.dtype, copy=False)


def load_model(path, config: ModelConfig | None = None) -> ReHiTModel:
    """Build a model from the sidecar config (or ``config``) and load weights."""
    if config is None:
        side = config_path(path)
        if not side.is_file():
            raise CheckpointError(f"{path}: missing config sidecar {side.name}")
        try:
            config = ModelConfig.from_dict(json.loads(side.read_text()))
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"{side}: invalid model config ({exc})") from exc
    model = build_model(config)
    load_into(model, path)
    return model
