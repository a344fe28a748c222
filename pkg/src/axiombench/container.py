"""Flat binary container for named float64 tensors.

Layout (all integers little-endian):

    magic   4 bytes  b"AXBM"
    version u32      currently 1
    count   u32      number of entries
    entry*  count times:
        name_len u32, name (utf-8), ndim u32, dims u64 * ndim,
        data     raw little-endian float64, C order

Round trips are bit-exact; files are written via a temporary name and
renamed into place so a crash never leaves a truncated container behind.
"""

import hashlib
import os
import struct

import numpy as np

MAGIC = b"AXBM"
VERSION = 1


class ContainerError(ValueError):
    """Malformed container bytes or invalid entries."""


def dumps_tensors(tensors):
    """Serialize an ordered mapping of name -> array to container bytes."""
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        if not raw:
            raise ContainerError("tensor name must be non-empty")
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.astype("<f8", copy=False).tobytes())
    return b"".join(parts)


def loads_tensors(data):
    """Parse container bytes back into an ordered dict of name -> array."""
    view = memoryview(data)
    if len(view) < 12 or bytes(view[:4]) != MAGIC:
        raise ContainerError("not a tensor container (bad magic)")
    version, count = struct.unpack("<II", view[4:12])
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    pos = 12
    out = {}

    def need(n):
        nonlocal pos
        if pos + n > len(view):
            raise ContainerError("truncated container")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    for _ in range(count):
        (name_len,) = struct.unpack("<I", need(4))
        name = bytes(need(name_len)).decode("utf-8")
        if name in out:
            raise ContainerError(f"duplicate tensor name {name!r}")
        (ndim,) = struct.unpack("<I", need(4))
        shape = struct.unpack(f"<{ndim}Q", need(8 * ndim))
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(need(8 * size), dtype="<f8").reshape(shape).copy()
        out[name] = arr
    if pos != len(view):
        raise ContainerError(f"{len(view) - pos} trailing byte(s) after last entry")
    return out


def save_tensors(path, tensors):
    """Write a container atomically (write-then-rename); returns sha256 hex."""
    data = dumps_tensors(tensors)
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return hashlib.sha256(data).hexdigest()


def load_tensors(path):
    with open(path, "rb") as fh:
        return loads_tensors(fh.read())


def content_hash(path):
    """sha256 hex digest of a file's bytes."""
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
