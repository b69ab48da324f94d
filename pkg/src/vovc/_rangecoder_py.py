"""Pure-Python range coder, bit-exact twin of the compiled ``_rangecoder``.

Carry-propagating 32-bit range coder with a 16-bit frequency total. Symbols
``|q| <= q_max`` map to table index ``q + q_max``; anything else is written as
the escape index ``2 q_max + 1`` followed by the value as a 32-bit two's
complement integer in two raw 16-bit chunks (high half first).
"""

from __future__ import annotations

from bisect import bisect_right

PROB_BITS = 16
TOTAL = 1 << PROB_BITS
TOP = 1 << 24
MASK32 = 0xFFFFFFFF


class RangeDecodeError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


def encode(symbols, cum, q_max: int) -> bytes:
    cum = [int(c) for c in cum]
    esc = 2 * q_max + 1
    out = bytearray()
    low = 0
    rng = MASK32
    cache = 0
    cache_size = 1

    def put(start, size):
        nonlocal low, rng, cache, cache_size
        r = rng >> PROB_BITS
        low += r * start
        rng = r * size
        while rng < TOP:
            rng = (rng << 8) & MASK32
            # shift_low
            if low < 0xFF000000 or low > MASK32:
                carry = low >> 32
                out.append((cache + carry) & 0xFF)
                for _ in range(cache_size - 1):
                    out.append((0xFF + carry) & 0xFF)
                cache_size = 0
                cache = (low >> 24) & 0xFF
            cache_size += 1
            low = (low << 8) & MASK32

    for q in symbols:
        q = int(q)
        if -q_max <= q <= q_max:
            i = q + q_max
            put(cum[i], cum[i + 1] - cum[i])
        else:
            put(cum[esc], cum[esc + 1] - cum[esc])
            u = q & MASK32
            put(u >> 16, 1)
            put(u & 0xFFFF, 1)
    for _ in range(5):
        if low < 0xFF000000 or low > MASK32:
            carry = low >> 32
            out.append((cache + carry) & 0xFF)
            for _ in range(cache_size - 1):
                out.append((0xFF + carry) & 0xFF)
            cache_size = 0
            cache = (low >> 24) & 0xFF
        cache_size += 1
        low = (low << 8) & MASK32
    return bytes(out)


def decode(data: bytes, n: int, cum, q_max: int) -> list[int]:
    data = bytes(data)
    cum = [int(c) for c in cum]
    esc = 2 * q_max + 1
    pos = 0

    def byte():
        nonlocal pos
        if pos >= len(data):
            raise RangeDecodeError("payload truncated", pos)
        b = data[pos]
        pos += 1
        return b

    if len(data) < 5:
        raise RangeDecodeError("payload shorter than coder state", len(data))
    if data[0] != 0:
        raise RangeDecodeError("bad leading byte", 0)
    pos = 1
    code = 0
    for _ in range(4):
        code = (code << 8) | byte()
    rng = MASK32

    def get(total_search: bool):
        nonlocal code, rng
        r = rng >> PROB_BITS
        v = code // r
        if v >= TOTAL:
            raise RangeDecodeError("corrupted payload", pos)
        if total_search:
            i = bisect_right(cum, v) - 1
            start, size = cum[i], cum[i + 1] - cum[i]
        else:
            i = start = v
            size = 1
        code -= r * start
        rng = r * size
        while rng < TOP:
            code = ((code << 8) | byte()) & MASK32
            rng = (rng << 8) & MASK32
        return i

    out = []
    for _ in range(n):
        i = get(True)
        if i == esc:
            u = (get(False) << 16) | get(False)
            out.append(u - (1 << 32) if u & 0x80000000 else u)
        else:
            out.append(i - q_max)
    if pos != len(data):
        raise RangeDecodeError("trailing bytes after payload", pos)
    return out
