"""Toy signal corpus and the VSIG / PGM file formats.

VSIG layout (little-endian)::

    b"VSIG" | u32 ndims | u32 dims[ndims] | f32 payload[prod(dims)]
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .prng import PrngStream

VSIG_MAGIC = b"VSIG"


class FormatError(ValueError):
    pass


@dataclass
class Signal:
    data: np.ndarray

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def flat(self) -> np.ndarray:
        return np.asarray(self.data, dtype=np.float64).ravel()

    def __len__(self) -> int:
        return self.data.size


def toy_image(seed: int, index: int, dim: int = 16) -> np.ndarray:
    """2-4 Gaussian blobs plus one sinusoidal grating on a ``dim x dim`` grid, clipped to [0, 1]."""
    u = PrngStream(seed, "corpus").uniform(index, 0, 32)
    yy, xx = np.mgrid[0:dim, 0:dim] / (dim - 1)
    img = np.zeros((dim, dim))
    n_blobs = 2 + int(u[0] * 3)
    for b in range(n_blobs):
        cx, cy, width, amp = u[1 + 4 * b: 5 + 4 * b]
        width = 0.08 + 0.25 * width
        amp = (0.3 + 0.7 * amp) * (1 if b % 2 == 0 else -0.5)
        img += amp * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * width**2))
    theta, freq, phase, amp = u[20:24]
    theta *= np.pi
    freq = 1.0 + 4.0 * freq
    grating = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + 2 * np.pi * phase)
    img += 0.15 * (0.5 + amp) * grating
    img = 0.25 + 0.6 * img
    return np.clip(img, 0.0, 1.0)


def gen_corpus(count: int, dim: int, seed: int) -> list[np.ndarray]:
    if count < 1:
        raise ValueError("count must be >= 1")
    return [toy_image(seed, i, dim) for i in range(count)]


def write_vsig(data: np.ndarray) -> bytes:
    data = np.asarray(data)
    head = VSIG_MAGIC + struct.pack(f"<I{data.ndim}I", data.ndim, *data.shape)
    return head + np.asarray(data, dtype="<f4").tobytes()


def read_vsig(raw: bytes) -> np.ndarray:
    if raw[:4] != VSIG_MAGIC:
        raise FormatError("not a VSIG file")
    try:
        (ndims,) = struct.unpack_from("<I", raw, 4)
        dims = struct.unpack_from(f"<{ndims}I", raw, 8)
    except struct.error as e:
        raise FormatError("truncated VSIG header") from e
    off = 8 + 4 * ndims
    n = int(np.prod(dims)) if dims else 1
    if len(raw) != off + 4 * n:
        raise FormatError(f"VSIG payload size mismatch: expected {4 * n} bytes, got {len(raw) - off}")
    return np.frombuffer(raw, "<f4", n, off).astype(np.float64).reshape(dims)


def read_pgm(raw: bytes) -> np.ndarray:
    """Binary 8-bit PGM (P5) mapped to [0, 1]."""
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise FormatError("only binary PGM (P5) is supported")
    w, h, maxval = (int(tok) for tok in tokens[1:])
    if maxval > 255:
        raise FormatError("only 8-bit PGM is supported")
    pos += 1
    pixels = np.frombuffer(raw, np.uint8, w * h, pos) if len(raw) >= pos + w * h else None
    if pixels is None:
        raise FormatError("truncated PGM payload")
    return pixels.reshape(h, w).astype(np.float64) / maxval


def write_pgm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    px = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode() + px.tobytes()
