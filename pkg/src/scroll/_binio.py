"""Helpers for the little-endian binary container formats."""

import struct

import numpy as np

from .errors import FormatError


class Reader:
    """Cursor over a byte buffer that reports byte offsets on truncation."""

    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, count: int, what: str) -> bytes:
        end = self.offset + count
        if end > len(self.data):
            raise FormatError(
                f"truncated {what}: need bytes [{self.offset}, {end}) "
                f"but data ends at byte {len(self.data)}"
            )
        raw = self.data[self.offset:end]
        self.offset = end
        return raw

    def expect_magic(self, magic: bytes) -> None:
        raw = self.take(len(magic), "magic")
        if raw != magic:
            raise FormatError(f"bad magic {raw!r} at byte 0, expected {magic!r}")

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt), what))

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        raw = self.take(itemsize * count, what)
        return np.frombuffer(raw, dtype=dtype, count=count)

    def expect_end(self) -> None:
        if self.offset != len(self.data):
            raise FormatError(
                f"trailing data: expected end at byte {self.offset}, "
                f"found {len(self.data) - self.offset} extra bytes"
            )


class Writer:
    """Accumulates little-endian fields into a byte string."""

    def __init__(self):
        self._parts: list[bytes] = []

    def raw(self, data: bytes) -> None:
        self._parts.append(data)

    def pack(self, fmt: str, *values) -> None:
        self._parts.append(struct.pack("<" + fmt, *values))

    def array(self, values: np.ndarray, dtype: str) -> None:
        self._parts.append(np.ascontiguousarray(values, dtype=dtype).tobytes())

    def getvalue(self) -> bytes:
        return b"".join(self._parts)
