"""Small binary/CSV/JSON persistence helpers shared by every stage.

Model arrays are stored as a sequence of 2-D blocks::

    b"TCBK1\\0" | u32 n_blocks | (u32 rows, u32 cols, rows*cols f64 LE)...

All writers go through a temp file + rename so partially written outputs
never replace good ones.
"""

from __future__ import annotations

import csv
import io
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

BLOCK_MAGIC = b"TCBK1\0"


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def encode_blocks(arrays: Sequence[np.ndarray]) -> bytes:
    out = bytearray(BLOCK_MAGIC)
    out += struct.pack("<I", len(arrays))
    for arr in arrays:
        a = np.asarray(arr, dtype="<f8")
        if a.ndim == 1:
            a = a[None, :]
        if a.ndim != 2:
            raise ValueError(f"blocks must be 1-D or 2-D, got shape {a.shape}")
        rows, cols = a.shape
        out += struct.pack("<II", rows, cols)
        out += np.ascontiguousarray(a).tobytes()
    return bytes(out)


def decode_blocks(data: bytes, source: str = "<bytes>") -> list[np.ndarray]:
    if data[:6] != BLOCK_MAGIC:
        raise ValueError(f"{source}: bad block magic")
    pos = 6
    (n,) = struct.unpack_from("<I", data, pos)
    pos += 4
    arrays = []
    for _ in range(n):
        if pos + 8 > len(data):
            raise ValueError(f"{source}: truncated block header")
        rows, cols = struct.unpack_from("<II", data, pos)
        pos += 8
        nbytes = rows * cols * 8
        if pos + nbytes > len(data):
            raise ValueError(f"{source}: truncated block payload")
        arrays.append(np.frombuffer(data, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols).astype(np.float64))
        pos += nbytes
    return arrays


def write_blocks(path: str | os.PathLike, arrays: Sequence[np.ndarray]) -> None:
    atomic_write_bytes(path, encode_blocks(arrays))


def read_blocks(path: str | os.PathLike) -> list[np.ndarray]:
    return decode_blocks(Path(path).read_bytes(), source=str(path))


def dump_json(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_json(path: str | os.PathLike, obj: Any) -> None:
    atomic_write_text(path, dump_json(obj))


def fmt(value: Any) -> str:
    """Deterministic CSV cell text; floats use the shortest round-trip repr."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if value != value:
            return "nan"
        return repr(value)
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def write_csv(path: str | os.PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]],
              comments: Sequence[str] = ()) -> None:
    buf = io.StringIO()
    for line in comments:
        buf.write(f"# {line}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    atomic_write_text(path, buf.getvalue())


def read_csv(path: str | os.PathLike) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(lines))
