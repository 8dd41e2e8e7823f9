"""Binary parameter files: ``AIRM`` magic, u32 version, named f64 arrays.

Layout (all integers little-endian)::

    b"AIRM" | u32 version | u32 count
    count x ( u32 name_len | name (utf-8) | u32 ndim | ndim x u64 dim | f64 data )
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"AIRM"
FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    pass


def dump_arrays(arrays: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f8", order="C")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def parse_arrays(raw: bytes) -> dict[str, np.ndarray]:
    if raw[:4] != MAGIC:
        raise ModelFormatError("not an AIRM parameter file")
    if len(raw) < 12:
        raise ModelFormatError("truncated header")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported format version {version} (expected {FORMAT_VERSION})")
    pos = 12
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos : pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}Q", raw, pos)
            pos += 8 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * size > len(raw):
                raise ModelFormatError(f"truncated data for array {name!r}")
            out[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * size
    except struct.error as exc:
        raise ModelFormatError(f"truncated file at byte {pos}") from exc
    if pos != len(raw):
        raise ModelFormatError(f"{len(raw) - pos} trailing bytes")
    return out


def save_model(path, state: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dump_arrays(state))


def load_model(path) -> dict[str, np.ndarray]:
    return parse_arrays(Path(path).read_bytes())
