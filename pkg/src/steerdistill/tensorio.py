"""Versioned little-endian tensor container shared by backbone and adapter checkpoints.

Layout::

    magic(4) version(u32) header_len(u32) header(json utf-8) n_tensors(u32)
    per tensor: name_len(u16) name dtype(u8) ndim(u8) dims(u32 * ndim) raw data

Tensors keep their own dtype so float64 runs round-trip bit-exactly.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i4"): 2, np.dtype("<i8"): 3}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class ContainerError(ValueError):
    pass


def write_container(path: str | Path, magic: bytes, header: dict, tensors: dict[str, np.ndarray]) -> None:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    head = json.dumps(header, sort_keys=True).encode()
    parts = [magic, struct.pack("<II", VERSION, len(head)), head, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_CODES:
            raise ContainerError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        arr = arr.astype(dt, copy=False)
        raw_name = name.encode()
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_container(path: str | Path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:4] != magic:
        raise ContainerError(f"{path}: bad magic {buf[:4]!r}, expected {magic!r}")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported version {version}")
    pos = 12
    header = json.loads(buf[pos : pos + hlen].decode())
    pos += hlen
    (n,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    tensors = {}
    for _ in range(n):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + nlen].decode()
        pos += nlen
        code, ndim = struct.unpack_from("<BB", buf, pos)
        pos += 2
        dims = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        dt = _CODE_DTYPES[code]
        count = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(buf, dtype=dt, count=count, offset=pos).reshape(dims).copy()
        pos += count * dt.itemsize
        tensors[name] = arr
    if pos != len(buf):
        raise ContainerError(f"{path}: {len(buf) - pos} trailing bytes")
    return header, tensors
