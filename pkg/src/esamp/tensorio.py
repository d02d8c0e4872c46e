"""Flat binary tensor files used for backbone checkpoints and distiller snapshots.

Layout (all integers little-endian signed 64-bit, all floats little-endian
IEEE-754 binary64)::

    magic       8 bytes  b"ESAMPTNS"
    version     int64    FORMAT_VERSION
    kind        int64    KIND_* code identifying the tensor order
    n_fields    int64
    fields      int64 * n_fields      (spec / counter values)
    n_tensors   int64
    repeated n_tensors times:
        ndim    int64
        dims    int64 * ndim
        data    float64 * prod(dims)  row-major

Tensors appear in the fixed order declared by the writer of each kind.
"""

from __future__ import annotations

import io
import os
from typing import BinaryIO, Sequence

import numpy as np

from .errors import InputError

MAGIC = b"ESAMPTNS"
FORMAT_VERSION = 1
KIND_TINY_TRANSFORMER = 1
KIND_DISTILLER = 2

_I64 = np.dtype("<i8")
_F64 = np.dtype("<f8")


def _write_ints(fh: BinaryIO, values: Sequence[int]) -> None:
    fh.write(np.asarray(values, dtype=_I64).tobytes())


def _read_ints(fh: BinaryIO, n: int) -> list[int]:
    raw = fh.read(8 * n)
    if len(raw) != 8 * n:
        raise InputError("truncated tensor file")
    return [int(x) for x in np.frombuffer(raw, dtype=_I64)]


def dump(fh: BinaryIO, kind: int, fields: Sequence[int], tensors: Sequence[np.ndarray]) -> None:
    fh.write(MAGIC)
    _write_ints(fh, [FORMAT_VERSION, kind, len(fields), *fields, len(tensors)])
    for t in tensors:
        t = np.ascontiguousarray(t, dtype=_F64)
        _write_ints(fh, [t.ndim, *t.shape])
        fh.write(t.tobytes(order="C"))


def load(fh: BinaryIO) -> tuple[int, list[int], list[np.ndarray]]:
    if fh.read(len(MAGIC)) != MAGIC:
        raise InputError("not an esamp tensor file (bad magic)")
    version, kind, n_fields = _read_ints(fh, 3)
    if version != FORMAT_VERSION:
        raise InputError(f"unsupported tensor file version {version}")
    fields = _read_ints(fh, n_fields)
    (n_tensors,) = _read_ints(fh, 1)
    tensors = []
    for _ in range(n_tensors):
        (ndim,) = _read_ints(fh, 1)
        dims = _read_ints(fh, ndim)
        count = int(np.prod(dims)) if dims else 1
        raw = fh.read(8 * count)
        if len(raw) != 8 * count:
            raise InputError("truncated tensor payload")
        tensors.append(np.frombuffer(raw, dtype=_F64).reshape(dims).astype(np.float64))
    return kind, fields, tensors


def save_file(path: str | os.PathLike, kind: int, fields: Sequence[int], tensors: Sequence[np.ndarray]) -> None:
    with open(path, "wb") as fh:
        dump(fh, kind, fields, tensors)


def load_file(path: str | os.PathLike) -> tuple[int, list[int], list[np.ndarray]]:
    with open(path, "rb") as fh:
        return load(fh)


def to_bytes(kind: int, fields: Sequence[int], tensors: Sequence[np.ndarray]) -> bytes:
    buf = io.BytesIO()
    dump(buf, kind, fields, tensors)
    return buf.getvalue()


def from_bytes(data: bytes) -> tuple[int, list[int], list[np.ndarray]]:
    return load(io.BytesIO(data))
