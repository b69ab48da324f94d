"""Counter-based random streams shared by encoder and decoder.

Every variate is a pure function of ``(key, domain, counters, draw index)``
computed with Philox4x32-10, so any candidate of any step can be regenerated
in isolation and in any order. Normals come from Box-Muller applied to
consecutive word pairs of each Philox block::

    u = (word + 0.5) / 2**32                  # in (0, 1), never 0 or 1
    z0 = sqrt(-2 ln u0) * cos(2 pi u1)
    z1 = sqrt(-2 ln u0) * sin(2 pi u1)

Counter layout of a block: ``(block, c_a, c_b, crc32(domain))``; the 64-bit key
is split into ``(low32, high32)``.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = 0x9E3779B9
_W1 = 0xBB67AE85
_MASK32 = np.uint64(0xFFFFFFFF)
_SHIFT32 = np.uint64(32)
_ROUNDS = 10

U64_MASK = (1 << 64) - 1


def philox4x32(counters: np.ndarray, key: tuple[int, int]) -> np.ndarray:
    """Philox4x32-10 block function, vectorized over rows of ``counters``.

    ``counters`` has shape ``(n, 4)`` (any integer dtype, values < 2**32).
    Returns ``(n, 4)`` uint32 words.
    """
    c = np.asarray(counters, dtype=np.uint64).reshape(-1, 4)
    c0, c1, c2, c3 = (c[:, i].copy() for i in range(4))
    k0, k1 = int(key[0]) & 0xFFFFFFFF, int(key[1]) & 0xFFFFFFFF
    for _ in range(_ROUNDS):
        p0 = _M0 * c0
        p1 = _M1 * c2
        hi0, lo0 = p0 >> _SHIFT32, p0 & _MASK32
        hi1, lo1 = p1 >> _SHIFT32, p1 & _MASK32
        c0, c1, c2, c3 = hi1 ^ c1 ^ np.uint64(k0), lo1, hi0 ^ c3 ^ np.uint64(k1), lo0
        k0 = (k0 + _W0) & 0xFFFFFFFF
        k1 = (k1 + _W1) & 0xFFFFFFFF
    return np.stack([c0, c1, c2, c3], axis=1).astype(np.uint32)


def domain_tag(domain: str) -> int:
    return zlib.crc32(domain.encode("utf-8")) & 0xFFFFFFFF


def _split_key(key: int) -> tuple[int, int]:
    key = int(key) & U64_MASK
    return key & 0xFFFFFFFF, key >> 32


def _words(key: int, domain: str, ca: np.ndarray, cb: np.ndarray, nblocks: int) -> np.ndarray:
    """Raw words for every (ca[i], cb[i]) row: shape ``(rows, 4 * nblocks)``."""
    ca = np.asarray(ca, dtype=np.uint64).ravel()
    cb = np.asarray(cb, dtype=np.uint64).ravel()
    rows = ca.size
    ctr = np.empty((rows, nblocks, 4), dtype=np.uint64)
    ctr[:, :, 0] = np.arange(nblocks, dtype=np.uint64)[None, :]
    ctr[:, :, 1] = ca[:, None]
    ctr[:, :, 2] = cb[:, None]
    ctr[:, :, 3] = domain_tag(domain)
    out = philox4x32(ctr.reshape(-1, 4), _split_key(key))
    return out.reshape(rows, nblocks * 4)


def _to_uniform(words: np.ndarray) -> np.ndarray:
    return (words.astype(np.float64) + 0.5) * 2.0**-32


def _box_muller(u: np.ndarray) -> np.ndarray:
    u0 = u[..., 0::2]
    u1 = u[..., 1::2]
    r = np.sqrt(-2.0 * np.log(u0))
    theta = 2.0 * np.pi * u1
    z = np.empty_like(u)
    z[..., 0::2] = r * np.cos(theta)
    z[..., 1::2] = r * np.sin(theta)
    return z


def uniforms(key: int, domain: str, ca, cb, size: int) -> np.ndarray:
    """Uniform(0,1) variates; one row of length ``size`` per counter pair."""
    ca = np.atleast_1d(ca)
    cb = np.broadcast_to(np.atleast_1d(cb), ca.shape)
    nblocks = max(1, -(-size // 4))
    return _to_uniform(_words(key, domain, ca, cb, nblocks))[:, :size]


def normals(key: int, domain: str, ca, cb, size: int) -> np.ndarray:
    """Standard-normal variates; one row of length ``size`` per counter pair."""
    ca = np.atleast_1d(ca)
    cb = np.broadcast_to(np.atleast_1d(cb), ca.shape)
    nblocks = max(1, -(-size // 4))
    return _box_muller(_to_uniform(_words(key, domain, ca, cb, nblocks)))[:, :size]


@dataclass(frozen=True)
class PrngStream:
    """A keyed family of streams; ``domain`` separates unrelated uses."""

    key: int
    domain: str

    def uniform(self, a: int, b: int = 0, size: int = 1) -> np.ndarray:
        return uniforms(self.key, self.domain, a, b, size)[0]

    def normal(self, a: int, b: int = 0, size: int = 1) -> np.ndarray:
        return normals(self.key, self.domain, a, b, size)[0]

    def normal_rows(self, rows, b: int, size: int) -> np.ndarray:
        """Normals for many first-counter values at a fixed second counter."""
        return normals(self.key, self.domain, rows, b, size)

    def integers(self, a: int, b: int, size: int) -> np.ndarray:
        """Raw 32-bit words, for hashing-style uses."""
        nblocks = max(1, -(-size // 4))
        return _words(self.key, self.domain, np.atleast_1d(a), np.atleast_1d(b), nblocks)[0, :size]


def derive_seed(root: int, index: int) -> int:
    """Deterministic 64-bit child seed, e.g. one per input file."""
    w = _words(root, "derive", np.array([index & 0xFFFFFFFF]), np.array([index >> 32]), 1)[0]
    return int(w[0]) | (int(w[1]) << 32)
