# -*- coding: utf-8 -*-

# range_coder.py

"""
32-bit renormalizing arithmetic coder over integer cumulative frequency tables.

All coding arithmetic is on Python integers, so the produced bytes do not
depend on the platform's floating point. Every table handed to the coder is
a cumulative list [0, c1, ..., total] with total <= 2**16 and no empty symbol.
"""

import bisect
import zlib

import numpy as np

STATE_BITS = 32
PRECISION_BITS = 16
TABLE_TOTAL = 1 << PRECISION_BITS
CRC_BYTES = 4


class BitstreamError(ValueError):
    """Raised on a corrupt, truncated or inconsistent bitstream."""


def quantize_pmf(pmf, precision=PRECISION_BITS):
    """
    Freeze a probability vector into an integer cumulative table

    Every symbol receives at least one count; rounding residue goes to the
    most probable symbol.

    Args:
        pmf (array-like): Non-negative probabilities (need not sum to 1)
        precision (int): Table precision in bits

    Returns:
        list[int]: Cumulative frequencies of length len(pmf) + 1
    """
    pmf = np.asarray(pmf, dtype=np.float64)
    n = pmf.shape[0]
    total = 1 << precision
    if n == 0 or n > total:
        raise ValueError(f"cannot build a {precision}-bit table for {n} symbols")
    pmf = np.clip(pmf, 0.0, None)
    mass = pmf.sum()
    pmf = pmf / mass if mass > 0 else np.full(n, 1.0 / n)
    freqs = np.floor(pmf * (total - n)).astype(np.int64) + 1
    freqs[int(np.argmax(freqs))] += total - int(freqs.sum())
    cdf = np.concatenate([[0], np.cumsum(freqs)])
    return [int(v) for v in cdf]


def uniform_cdf(n):
    """Cumulative table of an n-symbol uniform distribution."""
    return [i for i in range(n + 1)]


def ideal_bits(symbols, cdfs):
    """Information content in bits of a symbol sequence under its tables."""
    bits = 0.0
    for symbol, cdf in zip(symbols, cdfs):
        bits -= np.log2((cdf[symbol + 1] - cdf[symbol]) / cdf[-1])
    return bits


class _CoderBase:

    def __init__(self):
        self.full_range = 1 << STATE_BITS
        self.mask = self.full_range - 1
        self.top_mask = self.full_range >> 1
        self.second_mask = self.top_mask >> 1
        self.max_total = (self.full_range >> 2) + 2
        self.low = 0
        self.high = self.mask

    def _update(self, cdf, symbol):
        total = cdf[-1]
        if total > self.max_total:
            raise ValueError("frequency table total too large for the coder state")
        sym_low = cdf[symbol]
        sym_high = cdf[symbol + 1]
        if sym_high <= sym_low:
            raise ValueError(f"symbol {symbol} has zero frequency")
        span = self.high - self.low + 1
        self.high = self.low + sym_high * span // total - 1
        self.low = self.low + sym_low * span // total

        # Leading bits agree: emit them
        while ((self.low ^ self.high) & self.top_mask) == 0:
            self._shift()
            self.low = (self.low << 1) & self.mask
            self.high = ((self.high << 1) & self.mask) | 1

        # low = 01..., high = 10...: defer the bit
        while (self.low & ~self.high & self.second_mask) != 0:
            self._underflow()
            self.low = (self.low << 1) & (self.mask >> 1)
            self.high = ((self.high << 1) & (self.mask >> 1)) | self.top_mask | 1

    def _shift(self):
        raise NotImplementedError

    def _underflow(self):
        raise NotImplementedError


class ArithmeticEncoder(_CoderBase):
    """
    Single-use encoder; call finish() once and read the returned bytes.
    """

    def __init__(self):
        super().__init__()
        self._pending = 0
        self._bytes = bytearray()
        self._current = 0
        self._nbits = 0
        self._finished = False

    def _write_bit(self, bit):
        self._current = (self._current << 1) | bit
        self._nbits += 1
        if self._nbits == 8:
            self._bytes.append(self._current)
            self._current = 0
            self._nbits = 0

    def _shift(self):
        bit = self.low >> (STATE_BITS - 1)
        self._write_bit(bit)
        for _ in range(self._pending):
            self._write_bit(bit ^ 1)
        self._pending = 0

    def _underflow(self):
        self._pending += 1

    def encode(self, symbol, cdf):
        if self._finished:
            raise RuntimeError("encoder already finished")
        self._update(cdf, symbol)

    def encode_uniform(self, value, nbits=PRECISION_BITS):
        """Code an nbits-wide unsigned integer at exactly nbits cost."""
        if not 0 <= value < (1 << nbits):
            raise ValueError(f"value {value} does not fit in {nbits} bits")
        self._update(_UniformView(nbits), value)

    def finish(self):
        """
        Flush the coder and append a CRC-32 of the payload

        Returns:
            bytes: Coded payload followed by 4 CRC bytes
        """
        if not self._finished:
            self._write_bit(1)
            if self._nbits:
                self._bytes.append(self._current << (8 - self._nbits))
                self._current = 0
                self._nbits = 0
            self._finished = True
        payload = bytes(self._bytes)
        return payload + zlib.crc32(payload).to_bytes(CRC_BYTES, "big")


class _UniformView:
    """Cumulative view of a 2**nbits uniform table without materializing it."""

    def __init__(self, nbits):
        self.total = 1 << nbits

    def __getitem__(self, index):
        if index == -1:
            return self.total
        return index


class ArithmeticDecoder(_CoderBase):

    def __init__(self, data):
        super().__init__()
        data = bytes(data)
        if len(data) < CRC_BYTES:
            raise BitstreamError("stream shorter than its checksum")
        payload, crc = data[:-CRC_BYTES], data[-CRC_BYTES:]
        if zlib.crc32(payload).to_bytes(CRC_BYTES, "big") != crc:
            raise BitstreamError("stream checksum mismatch (corrupt data)")
        self._data = payload
        self._bit_pos = 0
        self.code = 0
        for _ in range(STATE_BITS):
            self.code = (self.code << 1) | self._read_bit()

    def _read_bit(self):
        byte_index = self._bit_pos >> 3
        if byte_index >= len(self._data):
            self._bit_pos += 1
            return 0
        bit = (self._data[byte_index] >> (7 - (self._bit_pos & 7))) & 1
        self._bit_pos += 1
        return bit

    def _shift(self):
        self.code = ((self.code << 1) & self.mask) | self._read_bit()

    def _underflow(self):
        self.code = (self.code & self.top_mask) | ((self.code << 1) & (self.mask >> 1)) | self._read_bit()

    def decode(self, cdf):
        total = cdf[-1]
        span = self.high - self.low + 1
        offset = self.code - self.low
        value = ((offset + 1) * total - 1) // span
        if not 0 <= value < total:
            raise BitstreamError("decoder state out of range (corrupt data)")
        symbol = bisect.bisect_right(cdf, value) - 1
        if symbol < 0 or symbol >= len(cdf) - 1:
            raise BitstreamError("decoded symbol outside alphabet (corrupt data)")
        self._update(cdf, symbol)
        return symbol

    def decode_uniform(self, nbits=PRECISION_BITS):
        view = _UniformView(nbits)
        span = self.high - self.low + 1
        offset = self.code - self.low
        value = ((offset + 1) * view.total - 1) // span
        if not 0 <= value < view.total:
            raise BitstreamError("decoder state out of range (corrupt data)")
        self._update(view, value)
        return value

