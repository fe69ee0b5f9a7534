"""Shared helpers for the little-endian binary file formats.

All three on-disk artifacts (dataset, model checkpoint, detector
checkpoint) follow the same envelope: a 5-byte ASCII magic, little-endian
u32 header fields, a float64 payload, and (for checkpoints) a trailing
CRC32 over every preceding byte.  Errors carry the byte offset at which
parsing failed.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

DATASET_MAGIC = b"ADVD1"
MODEL_MAGIC = b"ADVM1"
DETECTOR_MAGIC = b"ADVT1"


class FormatError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)


class Reader:
    """Cursor over a byte blob that reports truncation with offsets."""

    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(
                f"truncated file while reading {what}: expected {n} bytes, "
                f"have {len(self.blob) - self.pos}",
                offset=self.pos,
            )
        chunk = self.blob[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def expect_magic(self, magic: bytes) -> None:
        got = self.take(len(magic), "magic")
        if got != magic:
            raise FormatError(f"bad magic {got!r}, expected {magic!r}", offset=0)

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def f64_array(self, count: int, what: str) -> np.ndarray:
        raw = self.take(8 * count, what)
        return np.frombuffer(raw, dtype="<f8", count=count).astype(np.float64)

    def done(self) -> None:
        if self.pos != len(self.blob):
            raise FormatError(
                f"{len(self.blob) - self.pos} unexpected trailing bytes", offset=self.pos
            )


def pack_u32(*values: int) -> bytes:
    return struct.pack(f"<{len(values)}I", *values)


def pack_f64(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def append_crc(payload: bytes) -> bytes:
    return payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)


def strip_crc(blob: bytes) -> bytes:
    if len(blob) < 4:
        raise FormatError("file too short to contain a checksum", offset=0)
    payload, stored = blob[:-4], struct.unpack("<I", blob[-4:])[0]
    actual = zlib.crc32(payload) & 0xFFFFFFFF
    if stored != actual:
        raise FormatError(
            f"checksum mismatch: stored {stored:#010x}, computed {actual:#010x}",
            offset=len(blob) - 4,
        )
    return payload
