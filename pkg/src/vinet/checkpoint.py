"""Binary tensor-record files for model weights and precomputed features.

Layout (all integers little-endian)::

    b"VNT1"  u32 record_count
    record_count x { u16 name_len, name (UTF-8), u8 rank, rank x u32 dims,
                     prod(dims) x f32 payload (row-major) }

Training metadata (step, seed, config hash) goes to a JSON sidecar
``<path>.json`` so the binary layout stays fixed.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from collections import OrderedDict
from pathlib import Path
from typing import Mapping, Optional, Union

import numpy as np

MAGIC = b"VNT1"
PathLike = Union[str, os.PathLike]


class CheckpointError(ValueError):
    pass


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise CheckpointError(f"{name}: rank {arr.ndim} exceeds 255")
        if any(d > 0xFFFFFFFF for d in arr.shape):
            raise CheckpointError(f"{name}: dimension exceeds u32")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_tensors(buf: bytes) -> "OrderedDict[str, np.ndarray]":
    view = memoryview(buf)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated file while reading {what} at byte {pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise CheckpointError("bad magic bytes; not a VNT1 tensor file")
    (count,) = struct.unpack("<I", take(4, "record count"))
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for r in range(count):
        (name_len,) = struct.unpack("<H", take(2, f"record {r} name length"))
        name = bytes(take(name_len, f"record {r} name")).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, f"{name} rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"{name} dims"))
        n = 1
        for d in dims:
            n *= d
        if 4 * n > len(view) - pos:
            raise CheckpointError(f"{name}: dims {dims} exceed the remaining payload")
        arr = np.frombuffer(take(4 * n, f"{name} payload"), dtype="<f4").reshape(dims)
        out[name] = arr.astype(np.float32)
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after last record")
    return out


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_tensors(path: PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    _atomic_write(Path(path), encode_tensors(tensors))


def read_tensors(path: PathLike) -> "OrderedDict[str, np.ndarray]":
    return decode_tensors(Path(path).read_bytes())


def save_checkpoint(model, path: PathLike, metadata: Optional[dict] = None) -> None:
    """Write ``model``'s parameters (or a plain name->array mapping) to ``path``."""
    state = model.state_dict() if hasattr(model, "state_dict") else model
    write_tensors(path, state)
    if metadata is not None:
        _atomic_write(Path(str(path) + ".json"),
                      json.dumps(metadata, indent=2, sort_keys=True).encode())


def load_checkpoint(path: PathLike, model=None) -> "OrderedDict[str, np.ndarray]":
    """Read weights; if ``model`` is given they are loaded into it (names and shapes checked)."""
    state = read_tensors(path)
    if model is not None:
        model.load_state_dict(state)
    return state


def load_metadata(path: PathLike) -> Optional[dict]:
    side = Path(str(path) + ".json")
    return json.loads(side.read_text()) if side.exists() else None


def payload_digest(tensors: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name, arr in tensors.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return h.hexdigest()
