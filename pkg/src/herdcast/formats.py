"""Errors and low-level helpers shared by the binary file formats (.hxf, .hxs, .hxm)."""

from __future__ import annotations

import struct


class FormatError(ValueError):
    """A binary artifact could not be decoded."""


class BadMagicError(FormatError):
    """The file does not start with the expected magic bytes."""


class UnsupportedVersionError(FormatError):
    def __init__(self, message: str, version: int | None = None):
        super().__init__(message)
        self.version = version


class TruncatedFileError(FormatError):
    """The file ends before the declared payload."""


class Reader:
    """Cursor over a bytes buffer that raises TruncatedFileError on overrun."""

    def __init__(self, data: bytes, name: str = "<buffer>"):
        self.data = data
        self.pos = 0
        self.name = name

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(
                f"{self.name}: truncated at byte {len(self.data)} (needed {self.pos + n})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))
