"""Named-tensor checkpoint files.

Layout (all integers little-endian)::

    b"FLCK" | u32 version | u32 count
    count x ( u32 name_len | name (UTF-8) | u8 dtype | u32 ndim | u32 dims[ndim] | data )

dtype 0 is float32 and 1 is float64. Metadata (config echo, iteration
counter) travels as a JSON document stored in the float32 tensor
``__meta__``, one byte per element, so the file holds nothing but tensors.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"FLCK"
VERSION = 1
META_KEY = "__meta__"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


@dataclass
class ModelCheckpoint:
    tensors: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def group(self, prefix):
        """Tensors under ``prefix/`` with the prefix stripped."""
        p = prefix.rstrip("/") + "/"
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}

    def put(self, prefix, state):
        p = prefix.rstrip("/") + "/"
        for k, v in state.items():
            self.tensors[p + k] = np.asarray(v)

    def drop(self, prefix):
        p = prefix.rstrip("/") + "/"
        for k in [k for k in self.tensors if k.startswith(p)]:
            del self.tensors[k]

    def has(self, prefix):
        p = prefix.rstrip("/") + "/"
        return any(k.startswith(p) for k in self.tensors)

    def copy(self):
        return ModelCheckpoint({k: np.array(v) for k, v in self.tensors.items()},
                               json.loads(json.dumps(self.meta)))


def _storable(arr):
    arr = np.asarray(arr)
    if arr.dtype in _CODES:
        return arr
    if arr.dtype.kind in "biu":
        return arr.astype(np.float64)
    raise CheckpointError(f"cannot store dtype {arr.dtype}")


def to_bytes(ckpt: ModelCheckpoint) -> bytes:
    tensors = dict(ckpt.tensors)
    if META_KEY in tensors:
        raise CheckpointError(f"tensor name {META_KEY!r} is reserved")
    meta = json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")).encode()
    tensors[META_KEY] = np.frombuffer(meta, dtype=np.uint8).astype(np.float32)
    out = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = _storable(tensors[name])
        code = _CODES[arr.dtype]
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack("<BI", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(out)


def from_bytes(buf: bytes) -> ModelCheckpoint:
    view = memoryview(buf)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint while reading {what} at byte {pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    tensors = {}
    for i in range(count):
        (name_len,) = struct.unpack("<I", take(4, f"name length of tensor {i}"))
        try:
            name = bytes(take(name_len, f"name of tensor {i}")).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"tensor {i} name is not UTF-8") from exc
        code, ndim = struct.unpack("<BI", take(5, f"dtype of {name!r}"))
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name!r}")
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, f"dims of {name!r}"))
        dtype = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        data = np.frombuffer(take(nbytes, f"data of {name!r}"), dtype=dtype).reshape(dims)
        tensors[name] = data.astype(dtype.newbyteorder("="))
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after last tensor")
    meta_arr = tensors.pop(META_KEY, None)
    meta = {}
    if meta_arr is not None:
        meta = json.loads(meta_arr.astype(np.uint8).tobytes().decode())
    return ModelCheckpoint(tensors, meta)


def save_checkpoint(path, ckpt: ModelCheckpoint):
    data = to_bytes(ckpt)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_checkpoint(path) -> ModelCheckpoint:
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
