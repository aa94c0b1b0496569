"""Binary tensor payloads and checkpoint files.

Tensor record layout (all little-endian)::

    u64 rank | u64 dim[0] ... u64 dim[rank-1] | f32 data (row-major)

A checkpoint is ``u64 header_length | header (UTF-8 text) | tensor records``.
The header is canonical ``key = value`` text, one entry per line, keys sorted.
Values are always stored as 32-bit floats regardless of compute precision.
"""
from __future__ import annotations

import io
import os
import struct
from typing import BinaryIO, Iterable, Mapping

import numpy as np

from .errors import GnnmError

_U64 = struct.Struct("<Q")
MAGIC = b"GNNMCKPT1\n"


class CheckpointError(GnnmError):
    """A checkpoint or tensor payload is malformed."""


def write_tensor(fh: BinaryIO, array: np.ndarray) -> None:
    arr = np.asarray(array, dtype="<f4")
    fh.write(_U64.pack(arr.ndim))
    for dim in arr.shape:
        fh.write(_U64.pack(dim))
    fh.write(arr.tobytes(order="C"))


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"unexpected end of payload: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(fh: BinaryIO) -> np.ndarray:
    (rank,) = _U64.unpack(_read_exact(fh, 8))
    if rank > 16:
        raise CheckpointError(f"implausible tensor rank {rank}")
    shape = tuple(_U64.unpack(_read_exact(fh, 8))[0] for _ in range(rank))
    count = int(np.prod(shape, dtype=np.int64))
    data = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4")
    return data.reshape(shape).astype(np.float32)


def tensor_bytes(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, array)
    return buf.getvalue()


def canonical_text(entries: Mapping[str, object]) -> str:
    lines = []
    for key in sorted(entries):
        value = str(entries[key])
        if "\n" in value or "=" in key:
            raise CheckpointError(f"header entry {key!r} cannot be represented")
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def parse_canonical_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        key, sep, value = line.partition(" = ")
        if not sep:
            raise CheckpointError(f"header line {lineno} is not 'key = value': {line!r}")
        out[key] = value
    return out


def save_checkpoint(path: str | os.PathLike, header: Mapping[str, object],
                    tensors: Iterable[tuple[str, np.ndarray]]) -> None:
    tensors = list(tensors)
    entries = dict(header)
    entries["tensors"] = ",".join(name for name, _ in tensors)
    head = canonical_text(entries).encode("utf-8")
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_U64.pack(len(head)))
        fh.write(head)
        for _, arr in tensors:
            write_tensor(fh, arr)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: not a gnnm checkpoint")
        (hlen,) = _U64.unpack(_read_exact(fh, 8))
        header = parse_canonical_text(_read_exact(fh, hlen).decode("utf-8"))
        names = [n for n in header.pop("tensors", "").split(",") if n]
        tensors = {name: read_tensor(fh) for name in names}
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after last tensor")
    return header, tensors
