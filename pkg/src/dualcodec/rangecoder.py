"""Byte-oriented range coder with carry propagation, plus quantized CDF helpers.

The coder keeps a 32-bit range and a 64-bit low accumulator; pending 0xFF
bytes are buffered so carries propagate into already-produced output. CDF
tables are quantized to ``PRECISION`` bits (total mass exactly
``2**PRECISION``) and the interval remainder is assigned to the top symbol,
so encoder and decoder stay bit-exact given identical tables.

Wire behaviour is frozen: the first output byte is always 0x00 (the initial
cache) and flushing emits five bytes, so an empty stream is exactly
``b"\\x00\\x00\\x00\\x00\\x00"``. Golden vectors under tests/fixtures pin this.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError, DecodeError, TruncatedStreamError

PRECISION = 16
_TOTAL = 1 << PRECISION
_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF


@dataclass
class CodedSymbols:
    """Integer bin indices plus the CDF table each one is coded with."""

    symbols: np.ndarray
    cdf_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.symbols)


def validate_cdf(cdf: np.ndarray) -> None:
    cdf = np.asarray(cdf)
    if cdf.ndim != 1 or len(cdf) < 2:
        raise ContractError("CDF table must be a 1-D array with >= 2 entries")
    if cdf[0] != 0 or cdf[-1] != _TOTAL:
        raise ContractError(f"CDF must start at 0 and end at {_TOTAL}")
    if np.any(np.diff(cdf) < 0):
        raise ContractError("CDF must be non-decreasing")


def pmf_to_quantized_cdf(pmf: np.ndarray, precision: int = PRECISION) -> np.ndarray:
    """Quantize a pmf to an integer CDF with total 2**precision.

    Every bin keeps frequency >= 1 (the probability floor); rounding drift
    is settled deterministically against the largest bins.
    """
    pmf = np.asarray(pmf, dtype=np.float64)
    if pmf.ndim != 1 or len(pmf) == 0:
        raise ContractError("pmf must be a non-empty 1-D array")
    if np.any(pmf < 0) or not np.all(np.isfinite(pmf)) or pmf.sum() <= 0:
        raise ContractError("pmf entries must be finite, non-negative, with positive sum")
    total = 1 << precision
    scaled = pmf / pmf.sum() * total
    freqs = np.maximum(1, np.round(scaled).astype(np.int64))
    drift = int(total - freqs.sum())
    if drift > 0:
        # Hand surplus mass to the largest bins, one unit at a time.
        order = np.argsort(-scaled, kind="stable")
        for k in range(drift):
            freqs[order[k % len(freqs)]] += 1
    while drift < 0:
        # Take back from the currently largest bin above the floor.
        idx = int(np.argmax(freqs))
        take = min(freqs[idx] - 1, -drift)
        if take <= 0:
            raise ContractError("cannot quantize pmf: too many symbols for precision")
        freqs[idx] -= take
        drift += take
    cdf = np.zeros(len(freqs) + 1, dtype=np.uint32)
    np.cumsum(freqs, out=cdf[1:])
    return cdf


class RangeEncoder:
    """Streaming encoder; push bins via encode(), then flush() once.

    Instances are single-stream: never share one across concurrent
    operations. Distinct instances are fully independent."""

    def __init__(self):
        self.low = 0
        self.range = _MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()
        self._flushed = False

    def encode(self, cum_lo: int, cum_hi: int) -> None:
        if self._flushed:
            raise ContractError("encoder already flushed")
        r = self.range >> PRECISION
        self.low += r * cum_lo
        if cum_hi == _TOTAL:
            self.range -= r * cum_lo
        else:
            self.range = r * (cum_hi - cum_lo)
        while self.range < _TOP:
            self._shift_low()
            self.range = (self.range << 8) & _MASK32

    def _shift_low(self) -> None:
        if self.low < 0xFF000000 or self.low > _MASK32:
            carry = self.low >> 32
            b = self.cache
            while True:
                self.out.append((b + carry) & 0xFF)
                b = 0xFF
                self.cache_size -= 1
                if self.cache_size == 0:
                    break
            self.cache = (self.low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (self.low << 8) & _MASK32

    def flush(self) -> bytes:
        if not self._flushed:
            for _ in range(5):
                self._shift_low()
            self._flushed = True
        return bytes(self.out)


class RangeDecoder:
    """Mirror of RangeEncoder over a byte buffer."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.range = _MASK32
        self.code = 0
        self._read_byte()  # leading cache byte, always 0x00
        for _ in range(4):
            self.code = (self.code << 8) | self._read_byte()

    def _read_byte(self) -> int:
        if self.pos >= len(self.data):
            raise TruncatedStreamError("range-coded payload ended early", self.pos)
        b = self.data[self.pos]
        self.pos += 1
        return b

    def decode_target(self) -> int:
        """Cumulative-frequency target of the next symbol, in [0, 2**P)."""
        r = self.range >> PRECISION
        return min(self.code // r, _TOTAL - 1)

    def decode_update(self, cum_lo: int, cum_hi: int) -> None:
        r = self.range >> PRECISION
        self.code -= r * cum_lo
        if cum_hi == _TOTAL:
            self.range -= r * cum_lo
        else:
            self.range = r * (cum_hi - cum_lo)
        while self.range < _TOP:
            self.code = ((self.code << 8) & _MASK32) | self._read_byte()
            self.range = (self.range << 8) & _MASK32


def range_encode(coded: CodedSymbols, cdfs: Sequence[np.ndarray]) -> bytes:
    """Encode bin indices against their per-id quantized CDF tables."""
    symbols = np.asarray(coded.symbols, dtype=np.int64)
    ids = np.asarray(coded.cdf_ids, dtype=np.int64)
    if symbols.shape != ids.shape or symbols.ndim != 1:
        raise ContractError("symbols and cdf_ids must be 1-D arrays of equal length")
    tables = [np.asarray(c, dtype=np.int64) for c in cdfs]
    for t in tables:
        validate_cdf(t)
    if len(ids) and (ids.min() < 0 or ids.max() >= len(tables)):
        raise ContractError("cdf_id out of range")
    enc = RangeEncoder()
    table_lists = [t.tolist() for t in tables]
    for s, i in zip(symbols.tolist(), ids.tolist()):
        cdf = table_lists[i]
        if s < 0 or s >= len(cdf) - 1:
            raise ContractError(f"symbol bin {s} outside table {i} support")
        lo, hi = cdf[s], cdf[s + 1]
        if lo == hi:
            raise ContractError(f"symbol bin {s} has zero frequency in table {i}")
        enc.encode(lo, hi)
    return enc.flush()


def range_decode(data: bytes, cdfs: Sequence[np.ndarray], cdf_ids: Sequence[int]) -> CodedSymbols:
    """Decode len(cdf_ids) bins; inverse of range_encode with the same tables."""
    ids = np.asarray(cdf_ids, dtype=np.int64)
    tables = [np.asarray(c, dtype=np.int64) for c in cdfs]
    for t in tables:
        validate_cdf(t)
    if ids.size == 0:
        if len(data) < 5:
            raise TruncatedStreamError("payload shorter than flush", len(data))
        return CodedSymbols(np.zeros(0, dtype=np.int64), ids)
    dec = RangeDecoder(data)
    table_lists = [t.tolist() for t in tables]
    np_tables = tables
    out = np.empty(len(ids), dtype=np.int64)
    for n, i in enumerate(ids.tolist()):
        target = dec.decode_target()
        s = int(np.searchsorted(np_tables[i], target, side="right")) - 1
        cdf = table_lists[i]
        if s < 0 or s >= len(cdf) - 1:
            raise DecodeError("decoded target outside table support", dec.pos)
        dec.decode_update(cdf[s], cdf[s + 1])
        out[n] = s
    return CodedSymbols(out, ids)


def estimate_bits(coded: CodedSymbols, cdfs: Sequence[np.ndarray]) -> float:
    """Shannon information content of the symbols under the quantized tables."""
    symbols = np.asarray(coded.symbols, dtype=np.int64)
    ids = np.asarray(coded.cdf_ids, dtype=np.int64)
    bits = 0.0
    for i in np.unique(ids):
        cdf = np.asarray(cdfs[i], dtype=np.int64)
        sel = symbols[ids == i]
        p = (cdf[sel + 1] - cdf[sel]) / float(_TOTAL)
        bits += float(-np.log2(p).sum())
    return bits
