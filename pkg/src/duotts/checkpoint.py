"""Versioned binary checkpoint bundles.

Layout: magic, version, UTF-8 JSON metadata blob, then each tensor as
(name, dtype code, shape, little-endian raw data). Shared by the tokenizer
and the dual-transformer generator.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"DTCK"
VERSION = 1

_DTYPES = {0: "<f4", 1: "<f8", 2: "<i8"}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}


class CheckpointError(ValueError):
    pass


def save_bundle(path: str | Path, tensors: dict[str, torch.Tensor],
                metadata: dict | None = None) -> None:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(meta)))
    parts.append(meta)
    parts.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = tensors[name].detach().cpu().numpy()
        if arr.dtype not in _DTYPE_CODES:
            arr = arr.astype(np.float32)
        nm = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nm)))
        parts.append(nm)
        parts.append(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}q", *arr.shape))
        parts.append(arr.astype(arr.dtype.newbyteorder("<")).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_bundle(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint bundle")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 8
    (meta_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    metadata = json.loads(raw[off : off + meta_len].decode("utf-8"))
    off += meta_len
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    tensors: dict[str, torch.Tensor] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off : off + nlen].decode("utf-8")
        off += nlen
        code, ndim = struct.unpack_from("<BB", raw, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}q", raw, off)
        off += 8 * ndim
        dtype = np.dtype(_DTYPES[code])
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype=dtype, count=n, offset=off).reshape(shape)
        off += n * dtype.itemsize
        tensors[name] = torch.from_numpy(arr.copy())
    return tensors, metadata
