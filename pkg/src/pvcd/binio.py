"""Low-level helpers shared by the binary file formats (features, index, weights).

All formats are little-endian with a 4-byte ASCII magic and a u16 version.
"""

from __future__ import annotations

import struct
from typing import BinaryIO


class FormatError(ValueError):
    """A binary file does not conform to its declared format."""


def read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    """Read exactly ``n`` bytes or raise a FormatError naming the offset."""
    offset = f.tell()
    data = f.read(n)
    if len(data) != n:
        raise FormatError(
            f"truncated file while reading {what}: wanted {n} bytes at offset "
            f"{offset}, got {len(data)}"
        )
    return data


def read_magic(f: BinaryIO, expected: bytes) -> None:
    offset = f.tell()
    magic = f.read(len(expected))
    if magic != expected:
        raise FormatError(
            f"bad magic at offset {offset}: expected {expected!r}, got {magic!r}"
        )


def read_u16(f: BinaryIO, what: str) -> int:
    return struct.unpack("<H", read_exact(f, 2, what))[0]


def read_u32(f: BinaryIO, what: str) -> int:
    return struct.unpack("<I", read_exact(f, 4, what))[0]


def read_u8(f: BinaryIO, what: str) -> int:
    return struct.unpack("<B", read_exact(f, 1, what))[0]


def write_u16(f: BinaryIO, value: int) -> None:
    f.write(struct.pack("<H", value))


def write_u32(f: BinaryIO, value: int) -> None:
    f.write(struct.pack("<I", value))


def write_u8(f: BinaryIO, value: int) -> None:
    f.write(struct.pack("<B", value))


def check_version(version: int, expected: int, fmt: str) -> None:
    if version != expected:
        raise FormatError(
            f"unsupported {fmt} version {version} (this build reads version {expected})"
        )
