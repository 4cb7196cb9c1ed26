"""Little-endian binary helpers shared by the DDF1 and DDS1 formats."""

import struct

import numpy as np


class FormatError(ValueError):
    pass


class BadMagicError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class LayoutMismatchError(FormatError):
    """Header fields disagree with each other or with trailing data."""


class Reader:
    def __init__(self, buf):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise TruncatedPayloadError(
                f"truncated payload: needed {n} bytes for {what} at offset {self.pos}, "
                f"{len(self.buf) - self.pos} left")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def magic(self, expected):
        got = bytes(self.take(len(expected), "magic"))
        if got != expected:
            raise BadMagicError(f"bad magic: expected {expected!r}, got {got!r}")

    def unpack(self, fmt, what):
        fmt = "<" + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def array(self, dtype, count, what):
        dt = np.dtype(dtype).newbyteorder("<")
        raw = self.take(dt.itemsize * count, what)
        return np.frombuffer(raw, dtype=dt, count=count).astype(dt.newbyteorder("="))

    def finish(self):
        if self.pos != len(self.buf):
            raise LayoutMismatchError(f"{len(self.buf) - self.pos} trailing bytes after payload")


def pack(fmt, *values):
    return struct.pack("<" + fmt, *values)


def le_bytes(arr, dtype):
    return np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<")).tobytes()
