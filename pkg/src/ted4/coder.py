"""32-bit carry-less range coder with 16-bit frequency tables.

Coder state is integer-only, so streams are bit-exact across platforms.
Static tables (:class:`SymbolCdf`) carry the attribute symbols; an adaptive
binary model carries the masks.
"""
from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass

import numpy as np

PRECISION = 16
TOTAL = 1 << PRECISION
_TOP = 1 << 24
_BOT = 1 << 16
_MASK = 0xFFFFFFFF


class CoderError(ValueError):
    pass


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK
        self.out = bytearray()

    def encode(self, cum, freq, total=TOTAL):
        r = self.range // total
        low = (self.low + cum * r) & _MASK
        rng = r * freq
        out = self.out
        while True:
            if (low ^ ((low + rng) & _MASK)) < _TOP:
                pass
            elif rng < _BOT:
                rng = (-low) & (_BOT - 1)
            else:
                break
            out.append(low >> 24)
            low = (low << 8) & _MASK
            rng = (rng << 8) & _MASK
        self.low, self.range = low, rng

    def encode_bits(self, value, nbits=16):
        self.encode(value, 1, 1 << nbits)

    def finish(self):
        for _ in range(4):
            self.out.append(self.low >> 24)
            self.low = (self.low << 8) & _MASK
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data):
        self.data = data
        self.pos = 0
        self.low = 0
        self.range = _MASK
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._byte()
        self._r = 1

    def _byte(self):
        if self.pos < len(self.data):
            b = self.data[self.pos]
        else:
            b = 0
        self.pos += 1
        return b

    def target(self, total=TOTAL):
        self._r = self.range // total
        v = ((self.code - self.low) & _MASK) // self._r
        if v >= total:
            raise CoderError("corrupt range-coded stream")
        return v

    def consume(self, cum, freq):
        low = (self.low + cum * self._r) & _MASK
        rng = self._r * freq
        code = self.code
        while True:
            if (low ^ ((low + rng) & _MASK)) < _TOP:
                pass
            elif rng < _BOT:
                rng = (-low) & (_BOT - 1)
            else:
                break
            code = ((code << 8) | self._byte()) & _MASK
            low = (low << 8) & _MASK
            rng = (rng << 8) & _MASK
        self.low, self.range, self.code = low, rng, code

    def decode_bits(self, nbits=16):
        v = self.target(1 << nbits)
        self.consume(v, 1)
        return v

    @property
    def overrun(self):
        return self.pos > len(self.data) + 4


# -- static tables ------------------------------------------------------------

def quantize_pmf(probs):
    """Integer frequencies summing to 2^16, each >= 1 (largest remainder).

    ``probs`` is (M, n) with the last column the escape mass.
    """
    probs = np.clip(np.asarray(probs, dtype=np.float64), 0.0, None)
    probs = np.atleast_2d(probs)
    M, n = probs.shape
    if n > TOTAL:
        raise CoderError("alphabet larger than the probability precision")
    sums = probs.sum(1, keepdims=True)
    probs = np.where(sums > 0, probs / np.where(sums > 0, sums, 1), 1.0 / n)
    target = probs * TOTAL
    freq = np.maximum(np.floor(target).astype(np.int64), 1)
    deficit = TOTAL - freq.sum(1)
    frac = target - np.floor(target)
    rows = np.arange(M)[:, None]
    # hand out missing counts by largest fractional part
    order = np.argsort(-frac, axis=1, kind="stable")
    rank = np.empty_like(order)
    rank[rows, order] = np.arange(n)[None, :]
    pos = np.maximum(deficit, 0)[:, None]
    freq += (rank < pos).astype(np.int64)
    # surplus from the min-1 floor: take counts from the largest bins
    surplus = np.maximum(-deficit, 0)
    while np.any(surplus > 0):
        big = np.argmax(freq, axis=1)
        take = np.minimum(surplus, freq[np.arange(M), big] - 1)
        freq[np.arange(M), big] -= take
        surplus -= take
    return freq


def cumulative(freq):
    freq = np.atleast_2d(freq)
    cum = np.zeros((freq.shape[0], freq.shape[1] + 1), dtype=np.int64)
    np.cumsum(freq, axis=1, out=cum[:, 1:])
    return cum


@dataclass
class SymbolCdf:
    """Cumulative counts over indices center-S..center+S plus an escape slot."""
    cum: np.ndarray
    S: int
    center: int = 0

    def __post_init__(self):
        self.cum = np.asarray(self.cum, dtype=np.int64)
        freq = np.diff(self.cum)
        if len(freq) != 2 * self.S + 2:
            raise CoderError("table length does not match the symbol bound")
        if self.cum[0] != 0 or self.cum[-1] != TOTAL or np.any(freq < 1):
            raise CoderError("malformed cdf: counts must be >= 1 and total 2^16")

    @property
    def freq(self):
        return np.diff(self.cum)

    def probabilities(self):
        return self.freq / TOTAL


def build_cdf(mu, sigma, q, S, center=None):
    from .entropy import gaussian_bin_probs

    if sigma <= 0 or q <= 0 or S < 1:
        raise ValueError("need sigma > 0, q > 0, S >= 1")
    c = int(np.round(mu / q)) if center is None else int(center)
    idx = np.arange(c - S, c + S + 1, dtype=np.float64)[None]
    p = gaussian_bin_probs(np.array([mu]), np.array([sigma]), np.array([q]), idx)
    p = np.concatenate([p, np.clip(1.0 - p.sum(1, keepdims=True), 0, None)], 1)
    return SymbolCdf(cumulative(quantize_pmf(p))[0], S, c)


def _rows(cum):
    # rows may be shared list objects (one table reused by many symbols)
    return cum.tolist() if isinstance(cum, np.ndarray) else cum


def _encode_many(enc, indices, cum, S, centers):
    n_esc = 2 * S + 1
    cum_rows = _rows(cum)
    for i, c, row in zip(indices, centers, cum_rows):
        s = i - c + S
        if 0 <= s < n_esc:
            enc.encode(row[s], row[s + 1] - row[s])
        else:
            enc.encode(row[n_esc], row[n_esc + 1] - row[n_esc])
            v = i & _MASK
            enc.encode_bits(v >> 16)
            enc.encode_bits(v & 0xFFFF)


def _decode_many(dec, cum, S, centers):
    n_esc = 2 * S + 1
    out = []
    for c, row in zip(centers, _rows(cum)):
        v = dec.target()
        s = bisect_right(row, v) - 1
        dec.consume(row[s], row[s + 1] - row[s])
        if s == n_esc:
            hi = dec.decode_bits()
            lo = dec.decode_bits()
            raw = (hi << 16) | lo
            out.append(raw - (1 << 32) if raw >= 1 << 31 else raw)
        else:
            out.append(s - S + c)
    return out


def range_encode(indices, cdfs):
    """Encode integer quantization indices, one :class:`SymbolCdf` per index."""
    indices = [int(i) for i in indices]
    if len(indices) != len(cdfs):
        raise ValueError("one cdf per symbol required")
    enc = RangeEncoder()
    for i, cdf in zip(indices, cdfs):
        if not isinstance(cdf, SymbolCdf):
            raise CoderError("malformed cdf")
        _encode_many(enc, [i], cdf.cum[None], cdf.S, [cdf.center])
    return enc.finish()


def range_decode(data, cdfs):
    dec = RangeDecoder(data)
    out = []
    for cdf in cdfs:
        out += _decode_many(dec, cdf.cum[None], cdf.S, [cdf.center])
    return out


class TableStream:
    """Batched static-table coding: all rows of a stream share ``S``.

    ``cum`` is an (M, 2S+2) array or a list of M cumulative rows.
    """

    def __init__(self):
        self.enc = RangeEncoder()

    def encode(self, indices, cum, S, centers):
        _encode_many(self.enc, [int(i) for i in indices], cum, S, [int(c) for c in centers])

    def finish(self):
        return self.enc.finish()


class TableDecoder:
    def __init__(self, data):
        self.dec = RangeDecoder(data)

    def decode(self, cum, S, centers):
        out = _decode_many(self.dec, cum, S, [int(c) for c in centers])
        if self.dec.overrun:
            raise CoderError("range-coded section is truncated")
        return np.array(out, dtype=np.int64)


# -- masks ------------------------------------------------------------------------

_ADAPT_INC = 32
_ADAPT_LIMIT = 1 << 16


def _mask_model_step(counts, bit):
    counts[bit] += _ADAPT_INC
    if counts[0] + counts[1] > _ADAPT_LIMIT:
        counts[0] = (counts[0] + 1) >> 1
        counts[1] = (counts[1] + 1) >> 1


def encode_mask(bits):
    """Adaptive binary range coding; a 4-byte little-endian length prefix
    makes the stream self-delimiting."""
    bits = [1 if b else 0 for b in bits]
    enc = RangeEncoder()
    counts = [1, 1]
    for b in bits:
        total = counts[0] + counts[1]
        if b:
            enc.encode(counts[0], counts[1], total)
        else:
            enc.encode(0, counts[0], total)
        _mask_model_step(counts, b)
    return len(bits).to_bytes(4, "little") + enc.finish()


def decode_mask(data):
    if len(data) < 4:
        raise CoderError("mask stream is truncated")
    n = int.from_bytes(data[:4], "little")
    dec = RangeDecoder(data[4:])
    counts = [1, 1]
    out = []
    for _ in range(n):
        total = counts[0] + counts[1]
        v = dec.target(total)
        b = 1 if v >= counts[0] else 0
        if b:
            dec.consume(counts[0], counts[1])
        else:
            dec.consume(0, counts[0])
        _mask_model_step(counts, b)
        out.append(b)
    if dec.overrun:
        raise CoderError("mask stream is truncated")
    return out
