# -*- coding: utf-8 -*-
# vim: set ft=python ts=4 sw=4 expandtab:

"""
Little-endian binary encoding shared by the checkpoint and bundle formats.
"""

import struct
from typing import Any, BinaryIO, Tuple

import numpy as np

from .interface import AdaBinError, FailureReason
from .tensor import DTYPE


class ByteWriter:
    """Writes packed little-endian fields to a stream."""

    def __init__(self, stream: BinaryIO) -> None:
        self.stream = stream

    def put(self, fmt: str, *values: Any) -> None:
        self.stream.write(struct.pack("<" + fmt, *values))

    def raw(self, data: bytes) -> None:
        self.stream.write(data)

    def reals(self, values: Any) -> None:
        self.stream.write(np.asarray(values, dtype="<f4").tobytes())


class ByteReader:
    """Bounds-checked reader that reports the offset of the failing field."""

    def __init__(self, data: bytes, reason: FailureReason, what: str) -> None:
        self.data = data
        self.reason = reason
        self.what = what
        self.offset = 0

    @property
    def remaining(self) -> int:
        return len(self.data) - self.offset

    def fail(self, comment: str) -> AdaBinError:
        return AdaBinError(self.reason, comment, self.offset)

    def take(self, size: int) -> bytes:
        if size < 0 or self.offset + size > len(self.data):
            raise self.fail("Truncated %s: wanted %d bytes, %d remain" % (self.what, size, self.remaining))
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def get(self, fmt: str) -> Tuple[Any, ...]:
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def reals(self, count: int) -> np.ndarray:
        values = np.frombuffer(self.take(4 * count), dtype="<f4").astype(DTYPE)
        if not np.all(np.isfinite(values)):
            raise self.fail("Non-finite value in %s" % self.what)
        return values

    def magic(self, expected: bytes) -> None:
        found = self.take(len(expected))
        if found != expected:
            self.offset = 0
            raise self.fail("Bad magic %r, expected %r" % (found, expected))

    def finish(self) -> None:
        if self.remaining:
            raise self.fail("%d trailing bytes after last record" % self.remaining)
