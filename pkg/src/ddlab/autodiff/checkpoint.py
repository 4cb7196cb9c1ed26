"""DDF1 parameter checkpoints.

Byte layout (all integers little-endian)::

    b"DDF1"
    u32   tensor count N
    N x { u16 name length, name (UTF-8), u8 dtype code (1 = float64),
          u8 ndim, ndim x u32 extent }
    N x raw float64 little-endian payload, in manifest order
"""

from __future__ import annotations

import os

import numpy as np

from ..binio import LayoutMismatchError, Reader, le_bytes, pack

MAGIC = b"DDF1"
DTYPE_FLOAT64 = 1


def encode_checkpoint(tensors):
    """Serialize an ordered mapping ``name -> array`` to DDF1 bytes."""
    parts = [MAGIC, pack("I", len(tensors))]
    arrays = []
    for name, arr in tensors.items():
        arr = np.asarray(getattr(arr, "data", arr), dtype=np.float64)
        raw_name = name.encode("utf-8")
        parts.append(pack("H", len(raw_name)) + raw_name)
        parts.append(pack("BB", DTYPE_FLOAT64, arr.ndim))
        parts.append(pack(f"{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        arrays.append(arr)
    parts.extend(le_bytes(a, np.float64) for a in arrays)
    return b"".join(parts)


def decode_checkpoint(buf):
    r = Reader(buf)
    r.magic(MAGIC)
    (count,) = r.unpack("I", "tensor count")
    manifest = []
    for _ in range(count):
        (nlen,) = r.unpack("H", "name length")
        name = bytes(r.take(nlen, "name")).decode("utf-8")
        code, ndim = r.unpack("BB", "dtype/ndim")
        if code != DTYPE_FLOAT64:
            raise LayoutMismatchError(f"unsupported dtype code {code} for {name!r}")
        shape = r.unpack(f"{ndim}I", "shape") if ndim else ()
        manifest.append((name, tuple(shape)))
    out = {}
    for name, shape in manifest:
        n = int(np.prod(shape)) if shape else 1
        out[name] = r.array(np.float64, n, f"payload of {name!r}").reshape(shape)
    r.finish()
    return out


def save_checkpoint(path, tensors):
    data = encode_checkpoint(tensors)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def load_checkpoint(path):
    with open(path, "rb") as f:
        return decode_checkpoint(f.read())
