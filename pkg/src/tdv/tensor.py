"""Dense float64 tensors and the binary container that ships them around.

Arrays are plain numpy ndarrays; this module owns the validation boundary
(finiteness on construction and on load) and the on-disk record format used
for checkpoints and test fixtures.

Record layout, all little-endian:

    magic   4 bytes  b"TDVT"
    rank    u32
    extents u32 * rank
    payload f64 * prod(extents), C order

A container file holds either a single record or a sequence of named records
(u32 name length + UTF-8 name before each record).
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from .errors import FormatError, NumericError

MAGIC = b"TDVT"
_MAX_RANK = 16


def tensor(data, shape=None) -> np.ndarray:
    """Construct a float64 array, rejecting non-finite entries.

    `shape` optionally reshapes flat input; mismatched sizes raise.
    """
    arr = np.asarray(data, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if arr.size != int(np.prod(shape, dtype=np.int64)):
            raise FormatError(
                f"cannot shape {arr.size} values into {shape}")
        arr = arr.reshape(shape)
    if not all_finite(arr):
        raise NumericError("tensor construction received non-finite values")
    return arr


def all_finite(arr: np.ndarray) -> bool:
    """Validity check: true iff every entry is finite."""
    return bool(np.isfinite(arr).all())


def write_tensor(f: BinaryIO, arr: np.ndarray) -> None:
    shape = np.shape(arr)
    # ascontiguousarray promotes 0-d to 1-d; restore the true rank
    arr = np.ascontiguousarray(arr, dtype=np.float64).reshape(shape)
    f.write(MAGIC)
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(arr.astype("<f8", copy=False).tobytes())


def read_tensor(f: BinaryIO) -> np.ndarray:
    magic = f.read(4)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    rank_raw = f.read(4)
    if len(rank_raw) != 4:
        raise FormatError("truncated record: missing rank")
    (rank,) = struct.unpack("<I", rank_raw)
    if rank > _MAX_RANK:
        raise FormatError(f"implausible rank {rank}")
    ext_raw = f.read(4 * rank)
    if len(ext_raw) != 4 * rank:
        raise FormatError("truncated record: missing extents")
    shape = struct.unpack(f"<{rank}I", ext_raw) if rank else ()
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    payload = f.read(8 * count)
    if len(payload) != 8 * count:
        raise FormatError("truncated record: payload shorter than extents")
    arr = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    if not all_finite(arr):
        raise NumericError("loaded tensor contains non-finite values")
    return arr


def save_tensor(path, arr: np.ndarray) -> None:
    """Write a single-record container file."""
    with open(path, "wb") as f:
        write_tensor(f, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        arr = read_tensor(f)
        if f.read(1):
            raise FormatError(f"{path}: trailing bytes after single record")
    return arr


def write_named(f: BinaryIO, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    f.write(struct.pack("<I", len(raw)))
    f.write(raw)
    write_tensor(f, arr)


def read_named(f: BinaryIO) -> tuple[str, np.ndarray] | None:
    """Read one named record, or None at a clean end of stream."""
    head = f.read(4)
    if not head:
        return None
    if len(head) != 4:
        raise FormatError("truncated record: partial name length")
    (n,) = struct.unpack("<I", head)
    if n > 4096:
        raise FormatError(f"implausible name length {n}")
    raw = f.read(n)
    if len(raw) != n:
        raise FormatError("truncated record: partial name")
    return raw.decode("utf-8"), read_tensor(f)


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    """Write a sequence of named records."""
    with open(path, "wb") as f:
        for name, arr in tensors.items():
            write_named(f, name, arr)


def load_tensors(path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        while True:
            rec = read_named(f)
            if rec is None:
                return out
            name, arr = rec
            if name in out:
                raise FormatError(f"{path}: duplicate tensor name {name!r}")
            out[name] = arr
