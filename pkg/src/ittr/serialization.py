"""Flat binary container for named parameter tensors.

Layout (all integers little-endian):

    magic   4 bytes  b"ITTR"
    version u32      currently 1
    count   u32      number of tensors
    per tensor:
        name_len u32, name UTF-8,
        rank     u32, extents u64 * rank,
        payload  raw values in the declared precision

The payload precision is declared by the writer (build/config level) and
must be supplied again on load; checkpoints record it in their sidecar
manifest so files stay self-describing.
"""

import os
import struct

import numpy as np

MAGIC = b"ITTR"
VERSION = 1


class FormatError(ValueError):
    """Raised for malformed or incompatible parameter files."""


def save_tensors(path, named_arrays, dtype=np.float32):
    """Write an ordered mapping name -> numpy array. Atomic (tmp + rename)."""
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise FormatError(f"unsupported precision {dtype}")
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(named_arrays)))
        for name, arr in named_arrays.items():
            arr = np.ascontiguousarray(arr, dtype=dtype)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.astype(dtype.newbyteorder("<"), copy=False).tobytes())
    os.replace(tmp, path)


def load_tensors(path, dtype=np.float32):
    """Read back a mapping name -> numpy array written by save_tensors."""
    dtype = np.dtype(dtype)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r} in {path}")
        version, count = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise FormatError(f"unsupported version {version} in {path}")
        out = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
            n = int(np.prod(shape)) if rank else 1
            payload = fh.read(n * dtype.itemsize)
            if len(payload) != n * dtype.itemsize:
                raise FormatError(f"truncated payload for tensor {name!r}")
            arr = np.frombuffer(payload, dtype=dtype.newbyteorder("<"))
            out[name] = arr.astype(dtype).reshape(shape)
    return out
