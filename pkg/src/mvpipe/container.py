"""Minimal named-tensor container, the on-disk checkpoint format for merging.

Layout (all integers little-endian, no padding)::

    b"MVTC" | version u32 | entry count u32
    per entry:
        name length u32 | UTF-8 name
        dtype u8 (0 = f32) | rank u8 | rank x dim u64
        raw element data, row-major
"""

from __future__ import annotations

import os
import struct
from math import prod
from typing import Iterable, Iterator

import numpy as np

from .core import atomic_write_bytes
from .errors import ContainerFormatError

MAGIC = b"MVTC"
FORMAT_VERSION = 1
DTYPE_F32 = 0

_DTYPES = {DTYPE_F32: np.dtype("<f4")}
_HEADER = struct.Struct("<4sII")


class TensorContainer:
    """Ordered mapping of tensor name to float32 array."""

    def __init__(self, entries: Iterable[tuple[str, np.ndarray]] | dict | None = None):
        self._entries: dict[str, np.ndarray] = {}
        if entries is not None:
            items = entries.items() if isinstance(entries, dict) else entries
            for name, arr in items:
                self[name] = arr

    def __setitem__(self, name: str, array) -> None:
        if not isinstance(name, str):
            raise TypeError(f"tensor names must be str, got {type(name).__name__}")
        arr = np.ascontiguousarray(array, dtype=_DTYPES[DTYPE_F32])
        if arr.ndim > 255 or any(d <= 0 for d in arr.shape):
            raise ValueError(f"tensor {name!r} has unsupported shape {arr.shape}")
        self._entries[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __contains__(self, name) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def keys(self):
        return self._entries.keys()

    def items(self):
        return self._entries.items()

    def schema(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self._entries.items()}

    def num_elements(self) -> int:
        return sum(v.size for v in self._entries.values())

    def bitwise_equal(self, other: "TensorContainer") -> bool:
        if list(self.keys()) != list(other.keys()):
            return False
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self._entries.values(), other._entries.values())
        )

    def __repr__(self) -> str:
        return f"TensorContainer({len(self)} tensors, {self.num_elements()} elements)"

    # -- serialization --------------------------------------------------

    def to_bytes(self) -> bytes:
        parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, len(self._entries))]
        for name, arr in self._entries.items():
            raw_name = name.encode("utf-8")
            parts.append(struct.pack("<I", len(raw_name)))
            parts.append(raw_name)
            parts.append(struct.pack(f"<BB{arr.ndim}Q", DTYPE_F32, arr.ndim, *arr.shape))
            parts.append(arr.tobytes(order="C"))
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "TensorContainer":
        view = memoryview(data)
        if len(view) < _HEADER.size:
            raise ContainerFormatError("truncated header")
        magic, version, count = _HEADER.unpack_from(view, 0)
        if magic != MAGIC:
            raise ContainerFormatError(f"bad magic {bytes(magic)!r}")
        if version != FORMAT_VERSION:
            raise ContainerFormatError(f"unsupported format version {version}")
        off = _HEADER.size
        out = cls()

        def take(n: int) -> memoryview:
            nonlocal off
            if off + n > len(view):
                raise ContainerFormatError(f"truncated at byte {off} (need {n} more)")
            chunk = view[off : off + n]
            off += n
            return chunk

        for _ in range(count):
            (name_len,) = struct.unpack("<I", take(4))
            try:
                name = bytes(take(name_len)).decode("utf-8")
            except UnicodeDecodeError:
                raise ContainerFormatError("tensor name is not valid UTF-8") from None
            dtype_code, rank = struct.unpack("<BB", take(2))
            if dtype_code not in _DTYPES:
                raise ContainerFormatError(f"tensor {name!r}: unknown dtype code {dtype_code}")
            shape = struct.unpack(f"<{rank}Q", take(8 * rank))
            if any(d == 0 for d in shape):
                raise ContainerFormatError(f"tensor {name!r}: zero-sized dimension in {shape}")
            if name in out:
                raise ContainerFormatError(f"duplicate tensor name {name!r}")
            dtype = _DTYPES[dtype_code]
            raw = take(prod(shape) * dtype.itemsize)
            out._entries[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
        if off != len(view):
            raise ContainerFormatError(f"{len(view) - off} trailing bytes after last tensor")
        return out

    def save(self, path: str | os.PathLike) -> None:
        atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "TensorContainer":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())
