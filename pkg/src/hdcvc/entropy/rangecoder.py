"""Byte-oriented range coder over 16-bit frequency tables.

Carry handling follows the classic cache/pending-byte scheme.  The leading
byte of the stream is always zero and is not stored; trailing zero bytes are
trimmed because the decoder reads zeros past the end of its input.
"""

from __future__ import annotations

from bisect import bisect_right
from typing import Sequence

import numpy as np

PRECISION = 16
TOTAL = 1 << PRECISION
_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF


class CoderError(ValueError):
    """Raised for unencodable symbols, invalid tables or malformed streams."""


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()

    def _shift_low(self) -> None:
        low = self.low
        if low < 0xFF000000 or low > _MASK32:
            carry = low >> 32
            temp = self.cache
            while True:
                self.out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if not self.cache_size:
                    break
            self.cache = (low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (low << 8) & _MASK32

    def encode(self, start: int, freq: int) -> None:
        r = self.range >> PRECISION
        self.low += r * start
        self.range = r * freq
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()

    def encode_bits(self, value: int, nbits: int) -> None:
        """Equiprobable bits, most significant first."""
        for i in range(nbits - 1, -1, -1):
            self.encode(((value >> i) & 1) << (PRECISION - 1), 1 << (PRECISION - 1))

    def finish(self) -> bytes:
        # any value in [low, low + range) decodes correctly; pick the one with
        # the most trailing zero bytes (range >= 2**24 guarantees one exists)
        self.low = (self.low + _TOP - 1) & ~(_TOP - 1)
        for _ in range(5):
            self._shift_low()
        data = bytes(self.out[1:])
        return data.rstrip(b"\x00")


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.range = _MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._byte()

    def _byte(self) -> int:
        if self.pos < len(self.data):
            b = self.data[self.pos]
        else:
            b = 0
        self.pos += 1
        return b

    def target(self) -> tuple[int, int]:
        r = self.range >> PRECISION
        v = self.code // r
        if v >= TOTAL:
            raise CoderError("corrupt stream: code value outside the coding interval")
        return v, r

    def consume(self, r: int, start: int, freq: int) -> None:
        self.code -= r * start
        self.range = r * freq
        while self.range < _TOP:
            self.code = ((self.code << 8) | self._byte()) & _MASK32
            self.range <<= 8

    def decode(self, cdf: Sequence[int]) -> int:
        v, r = self.target()
        s = bisect_right(cdf, v) - 1
        if s >= len(cdf) - 1:
            raise CoderError("corrupt stream: symbol beyond table")
        self.consume(r, cdf[s], cdf[s + 1] - cdf[s])
        return s

    def decode_bits(self, nbits: int) -> int:
        half = 1 << (PRECISION - 1)
        value = 0
        for _ in range(nbits):
            v, r = self.target()
            bit = 1 if v >= half else 0
            self.consume(r, bit * half, half)
            value = (value << 1) | bit
        return value

    @property
    def overrun(self) -> int:
        """Bytes read past the end of the stream (beyond the implicit zero padding)."""
        return max(0, self.pos - len(self.data) - 4)


def validate_cdf(cdf: Sequence[int]) -> None:
    if len(cdf) < 2 or cdf[0] != 0 or cdf[-1] != TOTAL:
        raise CoderError(f"cdf must run from 0 to {TOTAL}, got {cdf[0]}..{cdf[-1]} ({len(cdf)} entries)")
    if any(b <= a for a, b in zip(cdf, cdf[1:])):
        raise CoderError("cdf must be strictly increasing (every bin nonzero)")


def range_encode(symbols: Sequence[int], cdfs: Sequence[Sequence[int]]) -> bytes:
    """Encode bin indices; ``cdfs[i]`` is the cumulative table for ``symbols[i]``."""
    if len(symbols) != len(cdfs):
        raise CoderError(f"{len(symbols)} symbols but {len(cdfs)} tables")
    enc = RangeEncoder()
    for i, (s, cdf) in enumerate(zip(symbols, cdfs)):
        s = int(s)
        if not 0 <= s < len(cdf) - 1:
            raise CoderError(f"symbol {s} at index {i} outside table support [0, {len(cdf) - 2}]")
        enc.encode(cdf[s], cdf[s + 1] - cdf[s])
    return enc.finish()


def range_decode(data: bytes, cdfs: Sequence[Sequence[int]]) -> list[int]:
    dec = RangeDecoder(data)
    return [dec.decode(cdf) for cdf in cdfs]


def pmf_to_cdf(pmf: np.ndarray) -> list[int]:
    """Quantize a probability vector to a strictly increasing 16-bit cumulative table.

    Each bin gets at least frequency 1; rounding slack goes to the largest
    bin.  Pure integer post-processing, so identical inputs give
    identical tables on both ends of the channel.
    """
    pmf = np.asarray(pmf, dtype=np.float64)
    n = pmf.size
    if n < 1 or n > TOTAL:
        raise CoderError(f"cannot build a table with {n} bins")
    if not np.all(np.isfinite(pmf)) or np.any(pmf < 0):
        raise CoderError("pmf must be finite and nonnegative")
    s = pmf.sum()
    p = pmf / s if s > 0 else np.full(n, 1.0 / n)
    freq = np.maximum(np.floor(p * (TOTAL - n)).astype(np.int64), 0) + 1
    freq[int(np.argmax(freq))] += TOTAL - int(freq.sum())
    cdf = np.concatenate([[0], np.cumsum(freq)])
    return [int(v) for v in cdf]
