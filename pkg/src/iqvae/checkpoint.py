"""Named-tensor checkpoint container.

Layout, all little-endian: magic "IQVC", format version u32, then one record
per tensor until end of file.  A record is a u16 name length, the UTF-8 name,
a u32 rank, one u32 extent per axis, and the float32 payload in C order.
Records are written in sorted name order so identical parameters produce
identical bytes.  Writes go through a temp file and an atomic rename.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

_MAGIC = b"IQVC"
_VERSION = 1


class CheckpointFormatError(ValueError):
    """Container bytes do not parse as a checkpoint."""


def save_checkpoint(path: str, tensors: dict[str, np.ndarray]) -> None:
    parts = [struct.pack("<4sI", _MAGIC, _VERSION)]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise ValueError("tensor name too long: %r" % name[:64])
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack("<%dI" % arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    blob = b"".join(parts)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 8:
        raise CheckpointFormatError("file too short for header")
    magic, version = struct.unpack_from("<4sI", blob, 0)
    if magic != _MAGIC:
        raise CheckpointFormatError("bad magic %r" % magic)
    if version != _VERSION:
        raise CheckpointFormatError("unsupported version %d" % version)

    def take(off: int, n: int) -> int:
        if off + n > len(blob):
            raise CheckpointFormatError("truncated record at byte %d" % off)
        return off + n

    tensors: dict[str, np.ndarray] = {}
    off = 8
    while off < len(blob):
        end = take(off, 2)
        (name_len,) = struct.unpack_from("<H", blob, off)
        off = end
        end = take(off, name_len)
        name = blob[off:end].decode("utf-8")
        off = end
        end = take(off, 4)
        (rank,) = struct.unpack_from("<I", blob, off)
        off = end
        end = take(off, 4 * rank)
        shape = struct.unpack_from("<%dI" % rank, blob, off)
        off = end
        count = 1
        for extent in shape:
            count *= extent
        end = take(off, 4 * count)
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
        off = end
        if name in tensors:
            raise CheckpointFormatError("duplicate tensor name %r" % name)
        tensors[name] = arr.reshape(shape).astype(np.float32)
    return tensors
