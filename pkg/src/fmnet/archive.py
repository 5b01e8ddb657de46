"""FMTA tensor archive: a flat, ordered map of named float64 arrays.

Layout (all integers little-endian)::

    b"FMTA"  u32 entry_count
    per entry:
        u16 name_len, name (UTF-8), u8 dtype (0 = float64), u8 rank,
        rank x u64 dims, row-major float64 payload
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"FMTA"
FLOAT64 = 0


def dumps(entries: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(entries)))
    for name, arr in entries.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", FLOAT64, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise DataError("not an FMTA archive", magic=blob[:4])
    pos = 4
    try:
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            dtype, rank = struct.unpack_from("<BB", blob, pos)
            pos += 2
            if dtype != FLOAT64:
                raise DataError(f"unsupported element type {dtype}", entry=name)
            dims = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            count_el = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f8", count=count_el, offset=pos).reshape(dims)
            pos += 8 * count_el
            out[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise DataError("truncated FMTA archive") from exc
    return out


def save(path, entries: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(entries))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
