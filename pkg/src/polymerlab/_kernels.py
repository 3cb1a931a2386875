"""Compiled inner loops for environment sampling.

Everything here is serial on purpose: results must be independent of thread
count and scheduling, so no parallel reductions. The Philox logic is written
twice in this package, once here and once in plain numpy inside
``environment.py``; the output streams are asserted bit-identical in the
test suite.

One Philox2x64-10 evaluation yields two 64-bit words, and the counter
packing halves the last spatial coordinate, so two cells adjacent along the
last axis share one evaluation (the coordinate's parity picks the word).
The box fillers walk rows along the last axis and process two counter pairs
per iteration to keep two independent multiply chains in flight.
"""

import numba as nb
import numpy as np

PHILOX_M = np.uint64(0xD2B74407B1CE6E93)
PHILOX_BUMP = np.uint64(0x9E3779B97F4A7C15)
MASK32 = np.uint64(0xFFFFFFFF)
BIAS = np.int64(1 << 20)


@nb.njit(nb.types.UniTuple(nb.uint64, 2)(nb.uint64, nb.uint64, nb.uint64),
         cache=True, inline="always")
def philox_pair(c_hi, c_lo, key):
    """Both output words of ten Philox2x64 rounds on counter (c_hi, c_lo)."""
    x0 = c_lo
    x1 = c_hi
    k = key
    a_hi = PHILOX_M >> np.uint64(32)
    a_lo = PHILOX_M & MASK32
    for _ in range(10):
        b_hi = x0 >> np.uint64(32)
        b_lo = x0 & MASK32
        lo = PHILOX_M * x0
        t = a_lo * b_lo
        w1 = a_hi * b_lo + (t >> np.uint64(32))
        t2 = a_lo * b_hi + (w1 & MASK32)
        hi = a_hi * b_hi + (w1 >> np.uint64(32)) + (t2 >> np.uint64(32))
        x0 = hi ^ k ^ x1
        x1 = lo
        k = k + PHILOX_BUMP
    return x0, x1


@nb.njit(nb.types.UniTuple(nb.uint64, 4)(nb.uint64, nb.uint64, nb.uint64,
                                         nb.uint64, nb.uint64),
         cache=True, inline="always")
def philox_pair2(c_hi_a, c_lo_a, c_hi_b, c_lo_b, key):
    """Two independent Philox evaluations with interleaved rounds."""
    x0a = c_lo_a
    x1a = c_hi_a
    x0b = c_lo_b
    x1b = c_hi_b
    k = key
    a_hi = PHILOX_M >> np.uint64(32)
    a_lo = PHILOX_M & MASK32
    for _ in range(10):
        ba_hi = x0a >> np.uint64(32)
        ba_lo = x0a & MASK32
        bb_hi = x0b >> np.uint64(32)
        bb_lo = x0b & MASK32
        loa = PHILOX_M * x0a
        lob = PHILOX_M * x0b
        ta = a_lo * ba_lo
        tb = a_lo * bb_lo
        w1a = a_hi * ba_lo + (ta >> np.uint64(32))
        w1b = a_hi * bb_lo + (tb >> np.uint64(32))
        t2a = a_lo * ba_hi + (w1a & MASK32)
        t2b = a_lo * bb_hi + (w1b & MASK32)
        hia = a_hi * ba_hi + (w1a >> np.uint64(32)) + (t2a >> np.uint64(32))
        hib = a_hi * bb_hi + (w1b >> np.uint64(32)) + (t2b >> np.uint64(32))
        x0a = hia ^ k ^ x1a
        x1a = loa
        x0b = hib ^ k ^ x1b
        x1b = lob
        k = k + PHILOX_BUMP
    return x0a, x1a, x0b, x1b


@nb.njit(nb.float64(nb.uint64), cache=True, inline="always")
def _u01(word):
    return (np.float64(word >> np.uint64(11)) + 0.5) * (2.0 ** -53)


@nb.njit(cache=True)
def _row_starts(origin, shape):
    """Leading-coordinate slot values for every row, biased, as uint64.

    Rows run along the last axis. Returns an (n_rows, 3) array holding the
    biased values of coordinate slots 0..2 (slot d-1 is overwritten by the
    caller per cell; unused slots carry the bias).
    """
    d = origin.shape[0]
    n_rows = 1
    for j in range(d - 1):
        n_rows *= shape[j]
    slots = np.empty((n_rows, 3), np.uint64)
    for r in range(n_rows):
        rem = r
        for j in range(3):
            slots[r, j] = np.uint64(BIAS)
        for j in range(d - 2, -1, -1):
            cj = rem % shape[j]
            rem //= shape[j]
            slots[r, j] = np.uint64(origin[j] + cj + BIAS)
    return slots


@nb.njit(nb.types.UniTuple(nb.uint64, 2)(nb.uint64[:], nb.uint64, nb.int64,
                                         nb.uint64, nb.uint64),
         cache=True, inline="always")
def _counter_for(slots, t, pb, tag, d):
    """Counter words for row slots, halved last coordinate pb, stream tag."""
    s0 = slots[0]
    s1 = slots[1]
    s2 = slots[2]
    if d == nb.uint64(1):
        s0 = np.uint64(pb)
    elif d == nb.uint64(2):
        s1 = np.uint64(pb)
    elif d == nb.uint64(3):
        s2 = np.uint64(pb)
    c_lo = t | (s0 << np.uint64(21)) | (s1 << np.uint64(42))
    if d == nb.uint64(4):
        c_hi = s2 | (np.uint64(pb) << np.uint64(21)) | (tag << np.uint64(42))
    else:
        c_hi = s2 | (np.uint64(BIAS) << np.uint64(21)) | (tag << np.uint64(42))
    return c_hi, c_lo


@nb.njit(cache=True)
def philox_words_box(seed, t, origin, shape, tag, out):
    """Fill ``out`` (flat uint64, C order) with raw words for a box slice."""
    d = origin.shape[0]
    row_len = shape[d - 1]
    slots = _row_starts(origin, shape)
    tt = np.uint64(t)
    dd = np.uint64(d)
    tg = np.uint64(tag)
    b0 = origin[d - 1] + BIAS
    pos = 0
    for r in range(slots.shape[0]):
        row = slots[r]
        for b in range(b0, b0 + row_len):
            c_hi, c_lo = _counter_for(row, tt, b >> 1, tg, dd)
            y0, y1 = philox_pair(c_hi, c_lo, seed)
            out[pos] = y0 if (b & 1) == 0 else y1
            pos += 1


@nb.njit(cache=True)
def twopoint_weight_box(seed, t, origin, shape, tag, p, w_hi, w_lo, out):
    """Two-point-law weight slice: w_hi where u < p, else w_lo."""
    d = origin.shape[0]
    row_len = shape[d - 1]
    slots = _row_starts(origin, shape)
    tt = np.uint64(t)
    dd = np.uint64(d)
    tg = np.uint64(tag)
    b0 = origin[d - 1] + BIAS
    b_end = b0 + row_len
    for r in range(slots.shape[0]):
        row = slots[r]
        base = r * row_len
        # aligned interior: pairs [pb, pb+1] -> four cells per iteration
        pb_lo = (b0 + 1) >> 1
        pb_hi = (b_end - 2) >> 1               # last pair fully inside
        b = b0
        while b < (pb_lo << 1):
            c_hi, c_lo = _counter_for(row, tt, b >> 1, tg, dd)
            y0, y1 = philox_pair(c_hi, c_lo, seed)
            w = y0 if (b & 1) == 0 else y1
            out[base + b - b0] = w_hi if _u01(w) < p else w_lo
            b += 1
        pb = pb_lo
        while pb + 1 <= pb_hi:
            c_hi_a, c_lo_a = _counter_for(row, tt, pb, tg, dd)
            c_hi_b, c_lo_b = _counter_for(row, tt, pb + 1, tg, dd)
            y0a, y1a, y0b, y1b = philox_pair2(c_hi_a, c_lo_a,
                                              c_hi_b, c_lo_b, seed)
            j = base + (pb << 1) - b0
            out[j] = w_hi if _u01(y0a) < p else w_lo
            out[j + 1] = w_hi if _u01(y1a) < p else w_lo
            out[j + 2] = w_hi if _u01(y0b) < p else w_lo
            out[j + 3] = w_hi if _u01(y1b) < p else w_lo
            pb += 2
        b = max(pb << 1, b0)
        while b < b_end:
            c_hi, c_lo = _counter_for(row, tt, b >> 1, tg, dd)
            y0, y1 = philox_pair(c_hi, c_lo, seed)
            w = y0 if (b & 1) == 0 else y1
            out[base + b - b0] = w_hi if _u01(w) < p else w_lo
            b += 1


@nb.njit(cache=True)
def uniform_weight_box(seed, t, origin, shape, tag, c0, c1, out):
    """Uniform-law weight slice: exp(c0 + c1 * u) per cell."""
    d = origin.shape[0]
    row_len = shape[d - 1]
    slots = _row_starts(origin, shape)
    tt = np.uint64(t)
    dd = np.uint64(d)
    tg = np.uint64(tag)
    b0 = origin[d - 1] + BIAS
    b_end = b0 + row_len
    for r in range(slots.shape[0]):
        row = slots[r]
        base = r * row_len
        y0 = np.uint64(0)
        y1 = np.uint64(0)
        for b in range(b0, b_end):
            pb = b >> 1
            if (b & 1) == 0 or b == b0:
                c_hi, c_lo = _counter_for(row, tt, pb, tg, dd)
                y0, y1 = philox_pair(c_hi, c_lo, seed)
            w = y0 if (b & 1) == 0 else y1
            out[base + b - b0] = np.exp(c0 + c1 * _u01(w))
