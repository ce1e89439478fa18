"""Binary checkpoints of named float32 tensors.

Layout (little endian): magic ``SGACKPT1``, version byte, u64 tensor count,
then per tensor a u16 name length, the UTF-8 name, a u8 rank, u64 dims and
the raw float32 data.  Tensors are written in sorted name order.
"""

from __future__ import annotations

import hashlib
import os
import struct
from pathlib import Path

import numpy as np

from ..errors import ContractError

MAGIC = b"SGACKPT1"
VERSION = 1


def encode_checkpoint(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<BQ", VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f4", order="C")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> dict[str, np.ndarray]:
    if data[:8] != MAGIC:
        raise ContractError("not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<BQ", data, 8)
    if version != VERSION:
        raise ContractError(f"unsupported checkpoint version {version}")
    pos = 17
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2 : pos + 2 + n].decode("utf-8")
            pos += 2 + n
            (rank,) = struct.unpack_from("<B", data, pos)
            dims = struct.unpack_from(f"<{rank}Q", data, pos + 1)
            pos += 1 + 8 * rank
            size = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * size > len(data):
                raise ContractError(f"checkpoint truncated inside tensor {name!r}")
            out[name] = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * size
    except struct.error as exc:
        raise ContractError(f"checkpoint truncated: {exc}") from None
    if pos != len(data):
        raise ContractError(f"{len(data) - pos} trailing bytes after the last tensor")
    return out


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    """Write atomically so an interrupted save never replaces a good file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(tensors))
    os.replace(tmp, path)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())


def tensors_checksum(tensors: dict[str, np.ndarray]) -> str:
    return hashlib.sha256(encode_checkpoint(tensors)).hexdigest()


def load_into(params: dict[str, np.ndarray], tensors: dict[str, np.ndarray], prefix="") -> None:
    """Copy ``tensors[prefix + name]`` into every array of ``params``."""
    for k, v in params.items():
        key = prefix + k
        if key not in tensors:
            raise ContractError(f"checkpoint lacks tensor {key!r}")
        if tensors[key].shape != v.shape:
            raise ContractError(f"{key}: shape {tensors[key].shape} != {v.shape}")
        v[...] = tensors[key]
