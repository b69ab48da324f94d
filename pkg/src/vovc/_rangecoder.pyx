# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled range coder; bit-exact with ``_rangecoder_py``."""

from libc.stdint cimport int32_t, int64_t, uint8_t, uint32_t, uint64_t

from ._rangecoder_py import RangeDecodeError

cdef enum:
    PROB_BITS = 16
    TOTAL = 65536
    TOP = 16777216

cdef uint64_t CARRY_LO = 0xFF000000UL
cdef uint64_t MASK32 = 0xFFFFFFFFUL


cdef struct Enc:
    uint64_t low
    uint32_t rng
    uint8_t cache
    uint64_t cache_size
    uint8_t* out
    Py_ssize_t n


cdef inline void shift_low(Enc* e) noexcept nogil:
    cdef uint8_t carry
    if e.low < CARRY_LO or e.low > MASK32:
        carry = <uint8_t>(e.low >> 32)
        e.out[e.n] = <uint8_t>(e.cache + carry)
        e.n += 1
        while e.cache_size > 1:
            e.out[e.n] = <uint8_t>(0xFF + carry)
            e.n += 1
            e.cache_size -= 1
        e.cache_size = 0
        e.cache = <uint8_t>((e.low >> 24) & 0xFF)
    e.cache_size += 1
    e.low = (e.low << 8) & MASK32


cdef inline void put(Enc* e, uint32_t start, uint32_t size) noexcept nogil:
    cdef uint32_t r = e.rng >> PROB_BITS
    e.low += <uint64_t>r * start
    e.rng = r * size
    while e.rng < TOP:
        e.rng <<= 8
        shift_low(e)


def encode(const int64_t[:] symbols, const uint32_t[:] cum, int q_max):
    cdef Py_ssize_t n = symbols.shape[0], i
    cdef int esc = 2 * q_max + 1
    cdef int64_t q
    cdef uint32_t u
    cdef Enc e
    # at most 16 bits per coded unit plus two literals per escape, plus flush
    cdef bytearray buf = bytearray(6 * n + 16)
    e.low = 0
    e.rng = <uint32_t>MASK32
    e.cache = 0
    e.cache_size = 1
    e.out = <uint8_t*><char*>buf
    e.n = 0
    with nogil:
        for i in range(n):
            q = symbols[i]
            if -q_max <= q <= q_max:
                put(&e, cum[q + q_max], cum[q + q_max + 1] - cum[q + q_max])
            else:
                put(&e, cum[esc], cum[esc + 1] - cum[esc])
                u = <uint32_t>q
                put(&e, u >> 16, 1)
                put(&e, u & 0xFFFF, 1)
        for i in range(5):
            shift_low(&e)
    return bytes(buf[:e.n])


def decode(const uint8_t[:] data, Py_ssize_t n, const uint32_t[:] cum, int q_max):
    cdef Py_ssize_t length = data.shape[0], pos, k
    cdef int esc = 2 * q_max + 1, n_sym = 2 * q_max + 2, lo, hi, mid
    cdef uint32_t code = 0, rng = <uint32_t>MASK32, r, v, start, size, u
    cdef int idx, lit
    out = [0] * n
    if length < 5:
        raise RangeDecodeError("payload shorter than coder state", length)
    if data[0] != 0:
        raise RangeDecodeError("bad leading byte", 0)
    for pos in range(1, 5):
        code = (code << 8) | data[pos]
    pos = 5
    for k in range(n):
        idx = -1
        lit = 0
        u = 0
        while True:
            r = rng >> PROB_BITS
            v = code // r
            if v >= TOTAL:
                raise RangeDecodeError("corrupted payload", pos)
            if lit == 0:
                lo = 0
                hi = n_sym
                while hi - lo > 1:
                    mid = (lo + hi) >> 1
                    if cum[mid] <= v:
                        lo = mid
                    else:
                        hi = mid
                idx = lo
                start = cum[lo]
                size = cum[lo + 1] - start
            else:
                start = v
                size = 1
                u = (u << 16) | v
            code -= r * start
            rng = r * size
            while rng < TOP:
                if pos >= length:
                    raise RangeDecodeError("payload truncated", pos)
                code = (code << 8) | data[pos]
                pos += 1
                rng <<= 8
            if idx != esc or lit == 2:
                break
            lit += 1
        if idx == esc:
            out[k] = <int32_t>u
        else:
            out[k] = idx - q_max
    if pos != length:
        raise RangeDecodeError("trailing bytes after payload", pos)
    return out
