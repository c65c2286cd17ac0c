"""Integer arithmetic coding over quantized CDF tables.

The coder keeps a 32-bit [low, high] interval with underflow tracking; all
decisions are integer-only, so encoder and decoder stay in lockstep on any
platform given identical CDF tables. CDF tables hold cumulative integer
frequencies with total 2^16 and every symbol frequency >= 1.
"""

import numpy as np

from . import tensor as T
from .entropy import (SIGMA_FLOOR_CODING, V_MIN, V_MAX, pmf_gaussian_uniform,
                      tail_masses)

CDF_TOTAL = 1 << 16
STATE_BITS = 32
FULL = (1 << STATE_BITS) - 1
HALF = 1 << (STATE_BITS - 1)
QTR = 1 << (STATE_BITS - 2)


class CorruptStreamError(ValueError):
    """Decoder found a mechanically invalid stream; carries the position."""


# ---------------------------------------------------------------------------
# quantized CDFs

def build_cdfs(mu, sigma, v_min=V_MIN, v_max=V_MAX):
    """Vectorized CDF tables: (n, alphabet+1) int64, one row per (mu, sigma).

    Row layout: [0, F(1), ..., F(K)] with F(K) = 2^16. Frequencies follow the
    Gaussian-uniform PMF at the integer points; out-of-bound tail mass folds
    into the two edge symbols (out-of-bound values are clamped at quantize
    time, so the edges are where that mass actually lands). Largest-remainder
    rounding distributes the integer total; every symbol keeps frequency >= 1.
    """
    mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
    sigma = np.maximum(np.atleast_1d(np.asarray(sigma, dtype=np.float64)),
                       SIGMA_FLOOR_CODING)
    ks = np.arange(v_min, v_max + 1, dtype=np.float64)
    p = pmf_gaussian_uniform(ks[None, :], mu[:, None], sigma[:, None],
                             sigma_floor=SIGMA_FLOOR_CODING)
    lo, hi = tail_masses(mu, sigma, v_min, v_max)
    p[:, 0] += lo
    p[:, -1] += hi
    p /= p.sum(axis=1, keepdims=True)
    nsym = p.shape[1]
    spare = CDF_TOTAL - nsym
    ideal = p * spare
    base = np.floor(ideal)
    rem = ideal - base
    short = (spare - base.sum(axis=1)).astype(np.int64)
    order = np.argsort(-rem, axis=1, kind="stable")
    take = np.arange(nsym)[None, :] < short[:, None]
    extra = np.zeros_like(base, dtype=np.int64)
    np.put_along_axis(extra, order, take.astype(np.int64), axis=1)
    freqs = base.astype(np.int64) + 1 + extra
    cdf = np.zeros((p.shape[0], nsym + 1), dtype=np.int64)
    np.cumsum(freqs, axis=1, out=cdf[:, 1:])
    return cdf


def build_cdf(mu, sigma, v_min=V_MIN, v_max=V_MAX):
    """Single-table convenience wrapper around build_cdfs."""
    return build_cdfs([mu], [sigma], v_min, v_max)[0]


def cdf_bits(cdf, symbols):
    """Ideal code length in bits of `symbols` under quantized table(s).

    cdf: (K+1,) or (n, K+1) matching symbols (n,).
    """
    symbols = np.asarray(symbols, dtype=np.int64)
    if cdf.ndim == 1:
        freqs = cdf[symbols + 1] - cdf[symbols]
    else:
        rows = np.arange(symbols.size)
        freqs = cdf[rows, symbols + 1] - cdf[rows, symbols]
    return float(np.log2(CDF_TOTAL / freqs.astype(np.float64)).sum())


# ---------------------------------------------------------------------------
# bit IO

class _BitWriter:
    def __init__(self):
        self.bytes = bytearray()
        self._acc = 0
        self._n = 0

    def write(self, bit: int):
        self._acc = (self._acc << 1) | bit
        self._n += 1
        if self._n == 8:
            self.bytes.append(self._acc)
            self._acc = 0
            self._n = 0

    def getvalue(self) -> bytes:
        if self._n:
            self.bytes.append(self._acc << (8 - self._n))
            self._acc = 0
            self._n = 0
        return bytes(self.bytes)


class _BitReader:
    """Reads bits; past the end it yields zeros and counts them."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.phantom = 0

    def read(self) -> int:
        byte_i = self.pos >> 3
        if byte_i >= len(self.data):
            self.phantom += 1
            self.pos += 1
            return 0
        bit = (self.data[byte_i] >> (7 - (self.pos & 7))) & 1
        self.pos += 1
        return bit


# ---------------------------------------------------------------------------
# coder

class ArithmeticEncoder:
    def __init__(self):
        self.low = 0
        self.high = FULL
        self.pending = 0
        self._bits = _BitWriter()
        self.count = 0

    def _emit(self, bit: int):
        self._bits.write(bit)
        inv = 1 - bit
        for _ in range(self.pending):
            self._bits.write(inv)
        self.pending = 0

    def encode(self, cdf, symbol: int):
        total = int(cdf[-1])
        sl = int(cdf[symbol])
        sh = int(cdf[symbol + 1])
        if sl == sh:
            raise ValueError(f"zero-frequency symbol {symbol}")
        r = self.high - self.low + 1
        self.high = self.low + (r * sh) // total - 1
        self.low = self.low + (r * sl) // total
        while True:
            if self.high < HALF:
                self._emit(0)
            elif self.low >= HALF:
                self._emit(1)
                self.low -= HALF
                self.high -= HALF
            elif self.low >= QTR and self.high < 3 * QTR:
                self.pending += 1
                self.low -= QTR
                self.high -= QTR
            else:
                break
            self.low <<= 1
            self.high = (self.high << 1) | 1
        self.count += 1

    def finish(self) -> bytes:
        # pin a value inside [low, high]: 0111... if QTR fits, else 1000...
        self.pending += 1
        self._emit(0 if self.low < QTR else 1)
        return self._bits.getvalue()


class ArithmeticDecoder:
    def __init__(self, data: bytes):
        self._bits = _BitReader(data)
        self.low = 0
        self.high = FULL
        self.code = 0
        for _ in range(STATE_BITS):
            self.code = (self.code << 1) | self._bits.read()
        self.count = 0

    def decode(self, cdf) -> int:
        total = int(cdf[-1])
        r = self.high - self.low + 1
        offset = self.code - self.low
        value = ((offset + 1) * total - 1) // r
        if not (0 <= value < total):
            raise CorruptStreamError(
                f"invalid interval at symbol {self.count} "
                f"(bit {self._bits.pos})")
        symbol = int(np.searchsorted(cdf, value, side="right")) - 1
        sl = int(cdf[symbol])
        sh = int(cdf[symbol + 1])
        self.high = self.low + (r * sh) // total - 1
        self.low = self.low + (r * sl) // total
        while True:
            if self.high < HALF:
                pass
            elif self.low >= HALF:
                self.low -= HALF
                self.high -= HALF
                self.code -= HALF
            elif self.low >= QTR and self.high < 3 * QTR:
                self.low -= QTR
                self.high -= QTR
                self.code -= QTR
            else:
                break
            self.low <<= 1
            self.high = (self.high << 1) | 1
            self.code = (self.code << 1) | self._bits.read()
        self.count += 1
        return symbol


def ac_encode(symbols, cdfs) -> bytes:
    """Encode a symbol sequence; cdfs is one table or one per symbol."""
    enc = ArithmeticEncoder()
    one = isinstance(cdfs, np.ndarray) and cdfs.ndim == 1
    for i, s in enumerate(symbols):
        enc.encode(cdfs if one else cdfs[i], int(s))
    return enc.finish()


def ac_decode(data: bytes, cdfs, n: int):
    """Decode n symbols; cdfs is one table, a (n, K+1) array, or callable i->cdf."""
    dec = ArithmeticDecoder(data)
    out = []
    for i in range(n):
        if callable(cdfs):
            table = cdfs(i)
        elif isinstance(cdfs, np.ndarray) and cdfs.ndim == 1:
            table = cdfs
        else:
            table = cdfs[i]
        out.append(dec.decode(table))
    return out
