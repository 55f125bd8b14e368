"""Versioned binary checkpoint container.

Layout::

    8 bytes   magic b"T2CCKPT\\n"
    uint32    format version
    uint64    header length
    header    UTF-8 JSON: {"config", "meta", "tensors": [{name, shape, offset}]}
    payload   little-endian float32 tensors, concatenated in header order

No timestamps are stored, so equal inputs give equal files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import CheckpointError

MAGIC = b"T2CCKPT\n"
VERSION = 1


def dump_checkpoint(config: dict, tensors: dict[str, np.ndarray], meta: dict) -> bytes:
    index, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    header = json.dumps({"config": config, "meta": meta, "tensors": index}, sort_keys=True).encode()
    return MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(chunks)


def save_checkpoint(path: str | Path, config: dict, tensors: dict[str, np.ndarray], meta: dict) -> None:
    from ..dataset import atomic_write

    atomic_write(path, dump_checkpoint(config, tensors, meta))


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray], dict]:
    """Returns ``(config, tensors, meta)``."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if raw[:8] != MAGIC or len(raw) < 20:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[20 : 20 + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise CheckpointError(f"{path}: corrupt header") from None
    base = 20 + hlen
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = base + entry["offset"]
        if start + 4 * count > len(raw):
            raise CheckpointError(f"{path}: truncated tensor {entry['name']}")
        tensors[entry["name"]] = np.frombuffer(raw, dtype="<f4", count=count, offset=start).reshape(shape).astype(np.float32)
    return header["config"], tensors, header["meta"]
