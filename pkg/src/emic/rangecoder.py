"""Range coding of integer symbols under per-symbol frequency tables, and the
``.emic`` bitstream container.

The coder is a carry-less byte-renormalising range coder with a 64-bit
state (low, range).  Frequency tables have a total of 2**16 and every bin is
at least 1, so no symbol is ever uncodable.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

PRECISION = 16
TOTAL = 1 << PRECISION

_MASK = (1 << 64) - 1
_TOP = 1 << 56
_BOT = 1 << 48
_FLUSH_BYTES = 2
_VIRTUAL_TAIL = 8 - _FLUSH_BYTES


class DecodeError(ValueError):
    pass


class ContainerError(ValueError):
    pass


# ---------------------------------------------------------------------------
# frequency tables


def quantize_pmf(pmf) -> np.ndarray:
    """Integer frequencies summing to 2**16, each >= 1 (largest-remainder rounding).

    Works on a single PMF or on a stack of PMFs along the last axis.
    """
    p = np.asarray(pmf, dtype=np.float64)
    p = np.maximum(p, 0.0)
    p = p / p.sum(axis=-1, keepdims=True)
    n = p.shape[-1]
    if n > TOTAL:
        raise ValueError("alphabet larger than the frequency total")
    scaled = p * (TOTAL - n)
    base = np.floor(scaled)
    freq = base.astype(np.int64) + 1
    remainder = TOTAL - freq.sum(axis=-1, keepdims=True)
    # stable sort: ties go to the lower symbol
    order = np.argsort(-(scaled - base), axis=-1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(n)[(None,) * (p.ndim - 1)], axis=-1)
    freq += rank < remainder
    return freq


def cumulative(freq) -> np.ndarray:
    """Prepend 0 and accumulate: cdf[s] .. cdf[s+1] is the interval of symbol s."""
    freq = np.asarray(freq, dtype=np.int64)
    pad = [(0, 0)] * (freq.ndim - 1) + [(1, 0)]
    return np.cumsum(np.pad(freq, pad), axis=-1)


def pmf_to_cdf(pmf) -> np.ndarray:
    return cumulative(quantize_pmf(pmf))


def table_cost_bits(symbols, cdfs) -> float:
    """Ideal code length of ``symbols`` under the quantized tables."""
    c0, f = _intervals(symbols, cdfs)
    f = np.asarray(f, dtype=np.float64)
    return float(np.sum(PRECISION - np.log2(f)))


def _intervals(symbols, cdfs):
    symbols = np.asarray(symbols, dtype=np.int64).ravel()
    if isinstance(cdfs, np.ndarray) and cdfs.ndim == 2:
        if len(cdfs) != len(symbols):
            raise ValueError(f"{len(symbols)} symbols but {len(cdfs)} tables")
        if len(symbols) and (symbols.min() < 0 or symbols.max() >= cdfs.shape[1] - 1):
            raise ValueError("symbol outside its table")
        rows = np.arange(len(symbols))
        lo = cdfs[rows, symbols]
        return lo.tolist(), (cdfs[rows, symbols + 1] - lo).tolist()
    if len(cdfs) != len(symbols):
        raise ValueError(f"{len(symbols)} symbols but {len(cdfs)} tables")
    lo, fr = [], []
    for s, cdf in zip(symbols.tolist(), cdfs):
        if not 0 <= s < len(cdf) - 1:
            raise ValueError("symbol outside its table")
        a = int(cdf[s])
        lo.append(a)
        fr.append(int(cdf[s + 1]) - a)
    return lo, fr


# ---------------------------------------------------------------------------
# coder


def rc_encode(symbols, cdfs) -> bytes:
    """Encode symbol indices; ``cdfs[i]`` is the cumulative table for symbol i."""
    starts, freqs = _intervals(symbols, cdfs)
    low, rng = 0, _MASK
    out = bytearray()
    for c0, f in zip(starts, freqs):
        r = rng >> PRECISION
        low += c0 * r
        rng = f * r
        while True:
            if (low ^ (low + rng)) < _TOP:
                pass
            elif rng < _BOT:
                rng = -low & (_BOT - 1)
            else:
                break
            out.append(low >> 56)
            low = (low << 8) & _MASK
            rng = (rng << 8) & _MASK
    # any value in [low, low + rng) identifies the stream; pick one whose low
    # 48 bits are zero so only two bytes need to be written
    v = ((low + _BOT - 1) >> 48) << 48
    out.append(v >> 56)
    out.append((v >> 48) & 0xFF)
    return bytes(out)


def rc_decode(data: bytes, cdfs) -> List[int]:
    """Inverse of :func:`rc_encode` given the same tables in the same order."""
    data = bytes(data)
    n = len(data)
    limit = n + _VIRTUAL_TAIL
    pos = 0

    def next_byte():
        nonlocal pos
        if pos >= limit:
            raise DecodeError("stream truncated")
        b = data[pos] if pos < n else 0
        pos += 1
        return b

    code = 0
    for _ in range(8):
        code = (code << 8) | next_byte()
    low, rng = 0, _MASK
    out: List[int] = []
    for cdf in cdfs:
        r = rng >> PRECISION
        val = (code - low) // r
        if not 0 <= val < TOTAL:
            raise DecodeError("corrupt stream")
        s = int(np.searchsorted(cdf, val, side="right")) - 1
        c0 = int(cdf[s])
        low += c0 * r
        rng = (int(cdf[s + 1]) - c0) * r
        while True:
            if (low ^ (low + rng)) < _TOP:
                pass
            elif rng < _BOT:
                rng = -low & (_BOT - 1)
            else:
                break
            code = ((code << 8) | next_byte()) & _MASK
            low = (low << 8) & _MASK
            rng = (rng << 8) & _MASK
        out.append(s)
    if pos != limit:
        raise DecodeError(f"stream length mismatch: consumed {pos - _VIRTUAL_TAIL} of {n} bytes")
    return out


# ---------------------------------------------------------------------------
# container


@dataclass(eq=False)
class BitstreamContainer:
    """``EMIC`` | ver | H | W | mask bitmap | model id | lambda idx | z seg | y segs.

    Every segment is a 32-bit little-endian length followed by its bytes.
    """

    height: int
    width: int
    units: np.ndarray
    model_id: int
    lambda_index: int
    z_stream: bytes
    y_streams: List[bytes] = field(default_factory=list)
    version: int = 1

    MAGIC = b"EMIC"
    VERSION = 1

    def __post_init__(self):
        self.units = np.asarray(self.units, dtype=bool)

    def __eq__(self, other):
        return (isinstance(other, BitstreamContainer)
                and (self.height, self.width, self.model_id, self.lambda_index, self.version)
                == (other.height, other.width, other.model_id, other.lambda_index, other.version)
                and np.array_equal(self.units, other.units)
                and self.z_stream == other.z_stream and list(self.y_streams) == list(other.y_streams))

    @staticmethod
    def grid(height: int, width: int):
        return -(-height // 16), -(-width // 16)

    def header_size(self) -> int:
        gh, gw = self.grid(self.height, self.width)
        return 4 + 1 + 2 + 2 + -(-gh * gw // 8) + 4 + 1

    def payload_bits(self) -> int:
        return 8 * (len(self.z_stream) + sum(len(s) for s in self.y_streams))

    def serialize(self) -> bytes:
        if not (0 < self.height <= 0xFFFF and 0 < self.width <= 0xFFFF):
            raise ContainerError(f"dimensions {self.height}x{self.width} do not fit 16 bits")
        if not 0 <= self.lambda_index <= 0xFF:
            raise ContainerError("lambda index does not fit 8 bits")
        gh, gw = self.grid(self.height, self.width)
        if self.units.shape != (gh, gw):
            raise ContainerError(f"bitmap shape {self.units.shape} does not match {gh}x{gw} units")
        parts = [self.MAGIC, struct.pack("<BHH", self.version, self.height, self.width),
                 np.packbits(self.units.ravel()).tobytes(),
                 struct.pack("<IB", self.model_id & 0xFFFFFFFF, self.lambda_index)]
        for seg in [self.z_stream, *self.y_streams]:
            parts.append(struct.pack("<I", len(seg)))
            parts.append(bytes(seg))
        return b"".join(parts)

    @classmethod
    def parse(cls, blob: bytes) -> "BitstreamContainer":
        blob = bytes(blob)
        if len(blob) < 9:
            raise ContainerError("header: truncated before dimensions")
        if blob[:4] != cls.MAGIC:
            raise ContainerError(f"magic: expected {cls.MAGIC!r}, got {blob[:4]!r}")
        version, h, w = struct.unpack_from("<BHH", blob, 4)
        if version != cls.VERSION:
            raise ContainerError(f"version: unsupported value {version}")
        if h == 0 or w == 0:
            raise ContainerError(f"dimensions: invalid {h}x{w}")
        gh, gw = cls.grid(h, w)
        nbytes = -(-gh * gw // 8)
        pos = 9
        if len(blob) < pos + nbytes + 5:
            raise ContainerError("mask bitmap: truncated")
        bits = np.unpackbits(np.frombuffer(blob, dtype=np.uint8, count=nbytes, offset=pos))
        units = bits[:gh * gw].reshape(gh, gw).astype(bool)
        pos += nbytes
        model_id, lam = struct.unpack_from("<IB", blob, pos)
        pos += 5
        segs = []
        while pos < len(blob):
            if pos + 4 > len(blob):
                raise ContainerError(f"segment {len(segs)}: truncated length field")
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            if pos + n > len(blob):
                raise ContainerError(f"segment {len(segs)}: length {n} exceeds remaining {len(blob) - pos} bytes")
            segs.append(blob[pos:pos + n])
            pos += n
        if not segs:
            raise ContainerError("z segment: missing")
        return cls(h, w, units, model_id, lam, segs[0], segs[1:], version)
