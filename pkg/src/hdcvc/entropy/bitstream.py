"""Sequence bitstream container.

Layout (little-endian)::

    header  : b"HDCV" | u8 version=1 | u16 width | u16 height
              | u8 intra_period | u8 lambda_index | u32 frame_count
    record* : u8 frame_type (0 = I, 1 = P) | u32 crc32 of the blocks below
              | 4 x (u32 length | payload)
              block order: motion hyper, motion latent, residual hyper, residual latent
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

MAGIC = b"HDCV"
VERSION = 1
_HEADER = struct.Struct("<4sBHHBBI")
_RECORD_HEAD = struct.Struct("<BI")
_LEN = struct.Struct("<I")
HEADER_BYTES = _HEADER.size
RECORD_OVERHEAD = _RECORD_HEAD.size + 4 * _LEN.size

I_FRAME = 0
P_FRAME = 1
BLOCK_NAMES = ("motion_hyper", "motion_latent", "residual_hyper", "residual_latent")


class BitstreamError(ValueError):
    pass


@dataclass
class FrameRecord:
    frame_type: int
    motion_hyper: bytes = b""
    motion_latent: bytes = b""
    residual_hyper: bytes = b""
    residual_latent: bytes = b""

    @property
    def blocks(self) -> tuple[bytes, bytes, bytes, bytes]:
        return (self.motion_hyper, self.motion_latent, self.residual_hyper, self.residual_latent)

    @property
    def payload_bytes(self) -> int:
        return sum(len(b) for b in self.blocks)

    @property
    def num_bytes(self) -> int:
        return RECORD_OVERHEAD + self.payload_bytes

    def _body(self) -> bytes:
        return b"".join(_LEN.pack(len(b)) + b for b in self.blocks)

    def to_bytes(self) -> bytes:
        if self.frame_type not in (I_FRAME, P_FRAME):
            raise BitstreamError(f"invalid frame type {self.frame_type}")
        body = self._body()
        return _RECORD_HEAD.pack(self.frame_type, zlib.crc32(body)) + body

    @classmethod
    def read(cls, data: bytes, pos: int = 0) -> tuple["FrameRecord", int]:
        if pos + _RECORD_HEAD.size > len(data):
            raise BitstreamError(f"truncated record header at byte {pos}")
        ftype, crc = _RECORD_HEAD.unpack_from(data, pos)
        if ftype not in (I_FRAME, P_FRAME):
            raise BitstreamError(f"invalid frame type {ftype} at byte {pos}")
        start = pos = pos + _RECORD_HEAD.size
        blocks = []
        for name in BLOCK_NAMES:
            if pos + _LEN.size > len(data):
                raise BitstreamError(f"truncated {name} length at byte {pos}")
            (n,) = _LEN.unpack_from(data, pos)
            pos += _LEN.size
            if pos + n > len(data):
                raise BitstreamError(f"{name} payload overruns the stream ({n} bytes at {pos})")
            blocks.append(bytes(data[pos : pos + n]))
            pos += n
        if zlib.crc32(data[start:pos]) != crc:
            raise BitstreamError(f"crc mismatch in record starting at byte {start - _RECORD_HEAD.size}")
        return cls(ftype, *blocks), pos


@dataclass
class Bitstream:
    width: int
    height: int
    intra_period: int
    lambda_index: int
    records: list[FrameRecord] = field(default_factory=list)

    @property
    def frame_count(self) -> int:
        return len(self.records)

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(
            MAGIC, VERSION, self.width, self.height, self.intra_period, self.lambda_index, self.frame_count
        )
        return head + b"".join(r.to_bytes() for r in self.records)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        if len(data) < HEADER_BYTES:
            raise BitstreamError("stream shorter than the header")
        magic, version, width, height, ip, li, count = _HEADER.unpack_from(data, 0)
        if magic != MAGIC:
            raise BitstreamError(f"bad magic {magic!r}")
        if version != VERSION:
            raise BitstreamError(f"unsupported version {version}")
        pos = HEADER_BYTES
        records = []
        for _ in range(count):
            rec, pos = FrameRecord.read(data, pos)
            records.append(rec)
        if pos != len(data):
            raise BitstreamError(f"{len(data) - pos} trailing bytes after {count} records")
        return cls(width, height, ip, li, records)

    def total_bytes(self) -> int:
        return HEADER_BYTES + sum(r.num_bytes for r in self.records)

    def bpp(self) -> float:
        """Bits per pixel over all frame records (the fixed sequence header is not counted)."""
        record_bytes = sum(r.num_bytes for r in self.records)
        return 8.0 * record_bytes / (self.frame_count * self.width * self.height)
