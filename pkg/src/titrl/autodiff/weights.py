"""Portable weight files.

Layout (all integers little-endian)::

    magic      4 bytes   b"TITW"
    version    u8        1
    meta_len   u32       length of the metadata blob
    meta       bytes     UTF-8 text (JSON for checkpoints, may be empty)
    count      u32       number of records
    records    count x:
        name_len  u16
        name      UTF-8 bytes
        ndim      u8
        dims      ndim x u32
        payload   prod(dims) x float32, row-major

Files are written with records in the order given, so identical inputs
produce identical bytes.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from titrl.errors import CheckpointError

MAGIC = b"TITW"
VERSION = 1


def dumps(tensors: dict[str, np.ndarray], metadata: str = "") -> bytes:
    meta = metadata.encode("utf-8")
    parts = [MAGIC, struct.pack("<BI", VERSION, len(meta)), meta, struct.pack("<I", len(tensors))]
    for name, array in tensors.items():
        array = np.asarray(array, dtype="<f4", order="C")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", array.ndim))
        parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(array.tobytes(order="C"))
    return b"".join(parts)


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], str]:
    try:
        if blob[:4] != MAGIC:
            raise CheckpointError("not a weight file (bad magic)")
        version, meta_len = struct.unpack_from("<BI", blob, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported weight file version {version}")
        offset = 9
        metadata = blob[offset : offset + meta_len].decode("utf-8")
        offset += meta_len
        (count,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<B", blob, offset)
            offset += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, offset)
            offset += 4 * ndim
            n = int(np.prod(shape, dtype=np.int64))
            payload = np.frombuffer(blob, dtype="<f4", count=n, offset=offset)
            offset += 4 * n
            tensors[name] = payload.reshape(shape).astype(np.float32)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt weight file: {exc}") from exc
    if offset != len(blob):
        raise CheckpointError(f"trailing {len(blob) - offset} bytes in weight file")
    return tensors, metadata


def save(path: str | Path, tensors: dict[str, np.ndarray], metadata: str = "") -> None:
    Path(path).write_bytes(dumps(tensors, metadata))


def load(path: str | Path) -> tuple[dict[str, np.ndarray], str]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no such weight file: {path}")
    return loads(path.read_bytes())
