"""Bit-exact range coder over 16-bit quantized CDF tables.

Coder state is a 32-bit ``low``/``range`` pair with byte-wise
renormalization and carry propagation through a cached byte plus a run of
pending ``0xFF`` bytes.  Symbol sub-intervals use multiply-then-shift bounds,
``floor(range * c / 2^16)``, so the alphabet partitions the whole range and
no probability mass is lost to truncation.  Only integer arithmetic happens
inside the coding loops.

The encoder flushes all four bytes of ``low``.  The decoder therefore
consumes every byte exactly once: asking for a byte past the end means the
payload was truncated, and leftover bytes mean it was padded.  Both are
reported as :class:`CorruptStreamError`.

A CDF table for an alphabet of ``n`` symbols is an ``int64`` array
``c[0..n]`` with ``c[0] = 0``, ``c[n] = 2**16`` and ``c[k+1] > c[k]``.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from ._jit import njit

PRECISION = 16
TOTAL = 1 << PRECISION
_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF

OK, TRUNCATED, TRAILING = 0, 1, 2


class CorruptStreamError(ValueError):
    """Payload cannot be decoded with the supplied tables."""


# --------------------------------------------------------------- CDF tables


@njit
def _quantize_pmf(pmf, out):
    n = pmf.size
    total = 0.0
    for i in range(n):
        total += pmf[i]
    spare = TOTAL - n
    freqs = np.empty(n, np.int64)
    frac = np.empty(n, np.float64)
    used = 0
    for i in range(n):
        scaled = pmf[i] / total * spare
        f = math.floor(scaled)
        freqs[i] = np.int64(f) + 1
        frac[i] = scaled - f
        used += np.int64(f)
    rem = spare - used
    if rem > 0:
        order = np.argsort(-frac, kind="mergesort")
        for r in range(rem):
            freqs[order[r % n]] += 1
    elif rem < 0:
        order = np.argsort(frac, kind="mergesort")
        taken = 0
        i = 0
        while taken < -rem:
            idx = order[i % n]
            if freqs[idx] > 1:
                freqs[idx] -= 1
                taken += 1
            i += 1
    out[0] = 0
    for i in range(n):
        out[i + 1] = out[i] + freqs[i]


@njit
def _quantize_rows(pmfs, sizes, out):
    for r in range(pmfs.shape[0]):
        _quantize_pmf(pmfs[r, : sizes[r]], out[r, : sizes[r] + 1])


def build_cdf(pmf) -> np.ndarray:
    """Quantize a pmf to a 16-bit cumulative frequency table.

    Every symbol gets frequency at least 1; the remaining ``2**16 - n`` counts
    are shared proportionally with largest-remainder rounding (ties broken by
    symbol index), so the table total is exactly ``2**16``.
    """
    pmf = np.ascontiguousarray(pmf, dtype=np.float64)
    if pmf.ndim != 1 or pmf.size == 0:
        raise ValueError(f"pmf must be a non-empty 1-d array, got shape {pmf.shape}")
    if pmf.size > TOTAL:
        raise ValueError(f"alphabet of {pmf.size} symbols exceeds the {TOTAL}-count frequency budget")
    if not np.all(np.isfinite(pmf)) or np.any(pmf < 0) or pmf.sum() <= 0:
        raise ValueError("pmf must be finite, non-negative and not all zero")
    out = np.empty(pmf.size + 1, np.int64)
    _quantize_pmf(pmf, out)
    return out


def build_cdfs(pmfs: np.ndarray, sizes: np.ndarray | None = None) -> np.ndarray:
    """Row-wise :func:`build_cdf`; row ``r`` uses its first ``sizes[r]`` entries."""
    pmfs = np.ascontiguousarray(pmfs, dtype=np.float64)
    if sizes is None:
        sizes = np.full(pmfs.shape[0], pmfs.shape[1], np.int64)
    sizes = np.asarray(sizes, np.int64)
    out = np.zeros((pmfs.shape[0], pmfs.shape[1] + 1), np.int64)
    _quantize_rows(pmfs, sizes, out)
    return out


def check_cdf(cdf: np.ndarray) -> None:
    cdf = np.asarray(cdf)
    if cdf.ndim != 1 or cdf.size < 2:
        raise ValueError("CDF table needs at least one symbol")
    if cdf[0] != 0 or cdf[-1] != TOTAL:
        raise ValueError(f"CDF table must run from 0 to {TOTAL}")
    if np.any(np.diff(cdf) < 1):
        raise ValueError("CDF table must be strictly increasing")


# --------------------------------------------------------------- coder core
# encoder state: [low, range, cache, have_cache, pending_ff, out_pos]
# decoder state: [code, range, in_pos, status]


@njit
def _encoder_state():
    st = np.zeros(6, np.int64)
    st[1] = _MASK32
    return st


@njit
def _shift_low(st, out):
    low = st[0]
    if low < 0xFF000000 or low > _MASK32:
        carry = low >> 32
        pos = st[5]
        if st[3] != 0:
            out[pos] = (st[2] + carry) & 0xFF
            pos += 1
        for _ in range(st[4]):
            out[pos] = (0xFF + carry) & 0xFF
            pos += 1
        st[4] = 0
        st[2] = (low >> 24) & 0xFF
        st[3] = 1
        st[5] = pos
    else:
        st[4] += 1
    st[0] = (low << 8) & _MASK32


@njit
def _encode_symbol(st, out, c_lo, c_hi):
    r = st[1]
    lo = (r * c_lo) >> PRECISION
    hi = (r * c_hi) >> PRECISION
    st[0] += lo
    r = hi - lo
    while r < _TOP:
        _shift_low(st, out)
        r <<= 8
    st[1] = r


@njit
def _encode_finish(st, out):
    for _ in range(5):
        _shift_low(st, out)
    return st[5]


@njit
def _decoder_state(data):
    st = np.zeros(4, np.int64)
    if data.size < 4:
        st[3] = TRUNCATED
        return st
    code = np.int64(0)
    for i in range(4):
        code = (code << 8) | np.int64(data[i])
    st[0] = code
    st[1] = _MASK32
    st[2] = 4
    return st


@njit
def _decode_symbol(st, data, cdf, n):
    """Decode one symbol index in ``[0, n)``; returns -1 once the input runs out."""
    r = st[1]
    code = st[0]
    v = (((code + 1) << PRECISION) - 1) // r
    a = 0
    b = n
    while b - a > 1:
        mid = (a + b) >> 1
        if cdf[mid] <= v:
            a = mid
        else:
            b = mid
    lo = (r * cdf[a]) >> PRECISION
    hi = (r * cdf[a + 1]) >> PRECISION
    code -= lo
    r = hi - lo
    while r < _TOP:
        if st[2] >= data.size:
            st[3] = TRUNCATED
            return -1
        code = (code << 8) | np.int64(data[st[2]])
        st[2] += 1
        r <<= 8
    st[0] = code
    st[1] = r
    return a


@njit
def _decoder_status(st, data):
    if st[3] != OK:
        return st[3]
    if st[2] != data.size:
        return TRAILING
    return OK


@njit
def _encode_tables(symbols, table_ids, cdfs):
    out = np.zeros(3 * symbols.size + 16, np.uint8)
    st = _encoder_state()
    for t in range(symbols.size):
        row = table_ids[t]
        s = symbols[t]
        _encode_symbol(st, out, cdfs[row, s], cdfs[row, s + 1])
    n = _encode_finish(st, out)
    return out[:n]


@njit
def _decode_tables(data, table_ids, cdfs, sizes):
    out = np.zeros(table_ids.size, np.int64)
    st = _decoder_state(data)
    if st[3] != OK:
        return out, st[3]
    for t in range(table_ids.size):
        row = table_ids[t]
        s = _decode_symbol(st, data, cdfs[row], sizes[row])
        if s < 0:
            return out, st[3]
        out[t] = s
    return out, _decoder_status(st, data)


# --------------------------------------------------------------- public API


def raise_for_status(status: int) -> None:
    if status == TRUNCATED:
        raise CorruptStreamError("payload truncated: decoder ran past the last byte")
    if status == TRAILING:
        raise CorruptStreamError("payload has trailing bytes the decoder did not consume")


def _stack_tables(tables: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    sizes = np.array([len(t) - 1 for t in tables], np.int64)
    cdfs = np.full((len(tables), sizes.max() + 1), TOTAL, np.int64)
    for i, t in enumerate(tables):
        cdfs[i, : len(t)] = t
    return cdfs, sizes


def _as_table_set(cdfs, count: int, table_ids):
    """Normalize the accepted table layouts to ``(cdfs2d, sizes, table_ids)``."""
    if isinstance(cdfs, np.ndarray) and cdfs.ndim == 1:
        cdfs2 = cdfs.astype(np.int64)[None, :]
        sizes = np.array([cdfs.size - 1], np.int64)
        ids = np.zeros(count, np.int64)
    else:
        if isinstance(cdfs, np.ndarray):
            cdfs2 = cdfs.astype(np.int64)
            sizes = np.full(cdfs2.shape[0], cdfs2.shape[1] - 1, np.int64)
        else:
            cdfs2, sizes = _stack_tables([np.asarray(t, np.int64) for t in cdfs])
        ids = np.arange(count, dtype=np.int64) if table_ids is None else np.asarray(table_ids, np.int64)
    if ids.size != count:
        raise ValueError(f"{count} symbols but {ids.size} table ids")
    if ids.size and (ids.min() < 0 or ids.max() >= cdfs2.shape[0]):
        raise ValueError("table id out of range")
    return np.ascontiguousarray(cdfs2), sizes, ids


def rc_encode(symbols, cdfs, table_ids=None) -> bytes:
    """Encode symbol indices.

    Args:
        symbols: integer indices into each symbol's alphabet.
        cdfs: one of
            * a single CDF table used for every symbol,
            * a sequence / 2-d array of tables, one per symbol, or indexed by
              ``table_ids``,
            * a callable ``provider(i, history) -> cdf`` consulted in coding
              order, where ``history`` holds the symbols already coded.
        table_ids: optional table index per symbol.

    Raises:
        ValueError: if any symbol lies outside its table's alphabet (checked
            before anything is coded).
    """
    symbols = np.asarray(symbols, np.int64).reshape(-1)
    if callable(cdfs):
        cdfs = [np.asarray(cdfs(i, symbols[:i]), np.int64) for i in range(symbols.size)]
        table_ids = None
    cdfs2, sizes, ids = _as_table_set(cdfs, symbols.size, table_ids)
    if symbols.size:
        bad = (symbols < 0) | (symbols >= sizes[ids])
        if bad.any():
            i = int(np.argmax(bad))
            raise ValueError(f"symbol {symbols[i]} at position {i} outside alphabet of size {sizes[ids[i]]}")
    return _encode_tables(symbols, ids, cdfs2).tobytes()


def rc_decode(data: bytes, cdfs, count: int, table_ids=None) -> np.ndarray:
    """Decode ``count`` symbol indices; table layouts as in :func:`rc_encode`.

    With a provider callable the provider is queried in exactly the encoding
    order, each time with the symbols decoded so far.
    """
    buf = np.frombuffer(bytes(data), np.uint8)
    if callable(cdfs):
        dec = RangeDecoder(buf)
        out = np.zeros(count, np.int64)
        for i in range(count):
            out[i] = dec.decode(cdfs(i, out[:i]))
        dec.finish()
        return out
    cdfs2, sizes, ids = _as_table_set(cdfs, count, table_ids)
    out, status = _decode_tables(buf, ids, cdfs2, sizes)
    raise_for_status(status)
    return out


class RangeDecoder:
    """Incremental decoder for adaptive tables chosen symbol by symbol."""

    def __init__(self, data):
        self.data = np.frombuffer(bytes(data), np.uint8) if not isinstance(data, np.ndarray) else data
        self.state = _decoder_state(self.data)
        raise_for_status(int(self.state[3]))

    def decode(self, cdf: np.ndarray) -> int:
        cdf = np.asarray(cdf, np.int64)
        s = _decode_symbol(self.state, self.data, cdf, cdf.size - 1)
        if s < 0:
            raise_for_status(int(self.state[3]))
        return int(s)

    def finish(self) -> None:
        raise_for_status(int(_decoder_status(self.state, self.data)))


def ideal_bits(symbols, cdfs, table_ids=None) -> float:
    """``-sum log2(freq / 2^16)`` under the quantized tables."""
    symbols = np.asarray(symbols, np.int64).reshape(-1)
    cdfs2, _, ids = _as_table_set(cdfs, symbols.size, table_ids)
    freq = cdfs2[ids, symbols + 1] - cdfs2[ids, symbols]
    return float(-np.sum(np.log2(freq / TOTAL)))


def naive_encode(symbols, tables: Callable[[int], np.ndarray]) -> bytes:
    """Reference coder on unbounded Python integers (no carry machinery).

    Applies the same interval partition as the production coder but keeps
    ``low`` as one big integer, so the output is simply its big-endian bytes.
    """
    low, rng, shifts = 0, _MASK32, 0
    for i, s in enumerate(symbols):
        cdf = tables(i)
        lo = (rng * int(cdf[s])) >> PRECISION
        hi = (rng * int(cdf[s + 1])) >> PRECISION
        low += lo
        rng = hi - lo
        while rng < _TOP:
            low <<= 8
            rng <<= 8
            shifts += 1
    return low.to_bytes(shifts + 4, "big")
