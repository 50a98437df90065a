"""GARW1 parameter checkpoints.

Layout: the 5-byte magic ``GARW1`` followed by one record per parameter until
end of file. A record is ``u32 name_len``, the UTF-8 name, ``u32 rank``,
``rank`` x ``u32`` extents, then ``prod(extents)`` little-endian float64
values in row-major order. All integers are little-endian.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError
from .tensor import Tensor

MAGIC = b"GARW1"


def encode_params(params: Mapping[str, Tensor | np.ndarray]) -> bytes:
    chunks = [MAGIC]
    for name, value in params.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(chunks)


def decode_params(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:5] != MAGIC:
        raise FormatError("bad magic, expected GARW1", 0)
    out: dict[str, np.ndarray] = {}
    pos = 5

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"truncated {what}", pos)
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    while pos < len(blob):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        try:
            name = take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("parameter name is not UTF-8", pos - name_len) from exc
        (rank,) = struct.unpack("<I", take(4, "rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "extents"))
        n = int(np.prod(shape)) if rank else 1
        payload = take(8 * n, f"payload of {name!r}")
        out[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
    return out


def save_params(path: str | Path, params: Mapping[str, Tensor | np.ndarray]) -> None:
    Path(path).write_bytes(encode_params(params))


def load_params(path: str | Path) -> dict[str, np.ndarray]:
    return decode_params(Path(path).read_bytes())
