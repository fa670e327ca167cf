"""Named-tensor weight files.

Layout (little-endian)::

    magic      8 bytes  b"PNSWGT\\x00\\x00"
    version    uint16   (currently 1)
    meta_len   uint32   length of the UTF-8 JSON metadata blob
    meta       bytes    JSON: {"model": ..., "config": {...}, ...}
    count      uint32   number of tensors
    per tensor:
        name_len uint16, name UTF-8
        dtype    uint8   (see _DTYPE_CODES)
        ndim     uint8
        shape    ndim x uint64
        data     raw little-endian values, C order
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

MAGIC = b"PNSWGT\x00\x00"
VERSION = 1

_DTYPE_CODES = {
    1: np.dtype("<f4"),
    2: np.dtype("<f8"),
    3: np.dtype("<i8"),
    4: np.dtype("<i4"),
    5: np.dtype("u1"),
    6: np.dtype("<f2"),
}
_CODE_OF = {v: k for k, v in _DTYPE_CODES.items()}


class WeightFileError(ValueError):
    pass


def save_weights(tensors: dict, path, meta: dict | None = None) -> None:
    meta_blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    out = [MAGIC, struct.pack("<HI", VERSION, len(meta_blob)), meta_blob, struct.pack("<I", len(tensors))]
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if dt not in _CODE_OF:
            raise WeightFileError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        name_b = name.encode("utf-8")
        out.append(struct.pack("<H", len(name_b)) + name_b)
        out.append(struct.pack("<BB", _CODE_OF[dt], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=dt.newbyteorder("<")).tobytes())
    Path(path).write_bytes(b"".join(out))


def load_weights(path) -> tuple[OrderedDict, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise WeightFileError(f"{path}: not a weight file")
    pos = 8
    version, meta_len = struct.unpack_from("<HI", raw, pos)
    pos += 6
    if version != VERSION:
        raise WeightFileError(f"{path}: unsupported version {version}")
    meta = json.loads(raw[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    tensors = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + name_len].decode("utf-8")
        pos += name_len
        code, ndim = struct.unpack_from("<BB", raw, pos)
        pos += 2
        if code not in _DTYPE_CODES:
            raise WeightFileError(f"{path}: unknown dtype code {code} for {name!r}")
        shape = struct.unpack_from(f"<{ndim}Q", raw, pos)
        pos += 8 * ndim
        dt = _DTYPE_CODES[code]
        n = int(np.prod(shape, dtype=np.int64))
        if pos + n * dt.itemsize > len(raw):
            raise WeightFileError(f"{path}: truncated tensor {name!r}")
        arr = np.frombuffer(raw, dtype=dt, count=n, offset=pos).reshape(shape).copy()
        pos += n * dt.itemsize
        tensors[name] = torch.from_numpy(arr)
    if pos != len(raw):
        raise WeightFileError(f"{path}: trailing bytes after last tensor")
    return tensors, meta
