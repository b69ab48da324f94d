"""Encoder/decoder pipelines and the VOVB bitstream container.

VOVB layout (little-endian unless noted)::

    b"VOVB" | u8 version | 4-byte config digest | u64 projection seed
    | u64 sampler seed | f32 s | f32 psi[9] | u32 symbol count
    | u32 payload length | payload
    [ u8 flag=1 | u32 N | u32 M | u64 seed | index bits (big-endian, padded) ]

The bracketed scaling block is present only for scaled encodes; a stream
without it ends right after the payload.

The config digest is the first four bytes of SHA-256 over the canonical text
of the decoder-relevant keys (``DIGEST_KEYS``).
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import config
from .adapt import FitConfig, LoraSpec, OneVector, build_projection, expand_vector, fit_vector_stage1
from .dynamics import ETA0, ETA1, DomainError, TimeGrid, ode_decode
from .net import VectorFieldNet
from .ratecode import (
    N_PSI,
    EntropyModel,
    Stage2Config,
    dequantize,
    fit_stage2,
    quantize,
    range_decode,
    range_encode,
    rate_bits,
)
from .scaling import ScalingTrace, decode_scaled, encode_scaled, index_bits, initial_state, pack_indices, unpack_indices
from .config import ConfigError
from .signals import FormatError

MAGIC = b"VOVB"
VERSION = 1
_HEAD = struct.Struct(f"<4sB4sQQf{N_PSI}fII")
_SCALE_HEAD = struct.Struct("<BIIQ")
HEADER_BITS = 8 * _HEAD.size
SCALE_BLOCK_HEADER_BITS = 8 * _SCALE_HEAD.size


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class CodecConfig:
    k: int = 2048
    rank: int = 1
    layers: str = "all"
    lam: float = 3e-3
    n_steps: int = 100
    eta0: float = ETA0
    eta1: float = ETA1
    proj_seed: int = 0
    sampler_seed: int = 0
    stage1_steps: int = 400
    stage2_steps: int = 300
    batch: int = 64
    q_max: int = 64

    DIGEST_KEYS = ("k", "rank", "layers", "n_steps", "eta0", "eta1", "q_max")

    def __post_init__(self):
        if self.k < 1 or self.rank < 1 or self.n_steps < 1 or self.q_max < 1 or self.batch < 1:
            raise ConfigError("k, rank, n_steps, batch and q_max must be >= 1")
        if self.lam < 0 or self.stage1_steps < 0 or self.stage2_steps < 0:
            raise ConfigError("lam and step counts must be non-negative")
        if not (0 < self.eta0 < 0.5 and 0 < self.eta1 < 0.5):
            raise ConfigError("eta0 and eta1 must lie in (0, 0.5)")
        for s in (self.proj_seed, self.sampler_seed):
            if not 0 <= s < 2**64:
                raise ConfigError("seeds are unsigned 64-bit")
        self.layer_indices()

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid.uniform(self.n_steps, self.eta0, self.eta1)

    def layer_indices(self) -> tuple[int, ...] | None:
        """Adapted layers, or ``None`` for every dense layer."""
        if self.layers == "all":
            return None
        try:
            idx = tuple(sorted({int(p) for p in self.layers.split(",")}))
        except ValueError as e:
            raise ConfigError(f"bad layers value {self.layers!r}") from e
        if not idx or min(idx) < 0:
            raise ConfigError(f"bad layers value {self.layers!r}")
        return idx

    def lora_spec(self, net: VectorFieldNet) -> LoraSpec:
        idx = self.layer_indices()
        if idx is not None and max(idx) >= net.n_layers:
            raise ConfigError(f"layer index out of range for a {net.n_layers}-layer net")
        return LoraSpec.for_net(net, self.rank, idx)

    def to_text(self) -> str:
        return config.dump(self)

    @classmethod
    def from_text(cls, text: str, **overrides) -> "CodecConfig":
        return config.load(cls, text, **overrides)

    def digest(self) -> bytes:
        text = "\n".join(f"{k}={_fmt(getattr(self, k))}" for k in self.DIGEST_KEYS)
        return hashlib.sha256(text.encode()).digest()[:4]


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


@dataclass(frozen=True)
class Bitstream:
    digest: bytes
    proj_seed: int
    sampler_seed: int
    s: float
    psi: tuple[float, ...]
    n_symbols: int
    payload: bytes
    scaling: ScalingTrace | None = None
    version: int = VERSION


@dataclass(frozen=True)
class BitAccounting:
    header_bits: int
    payload_bits: int
    scaling_bits: int
    index_bits: int
    dim: int

    @property
    def total_bits(self) -> int:
        return self.header_bits + self.payload_bits + self.scaling_bits

    @property
    def bpd(self) -> float:
        return self.total_bits / self.dim

    @property
    def header_share(self) -> float:
        return self.header_bits / self.total_bits


def serialize(b: Bitstream) -> bytes:
    if len(b.payload) >= 2**32 or b.n_symbols >= 2**32:
        raise FormatError("payload too large")
    out = _HEAD.pack(MAGIC, b.version, b.digest, b.proj_seed, b.sampler_seed, b.s, *b.psi,
                     b.n_symbols, len(b.payload)) + b.payload
    if b.scaling is not None:
        tr = b.scaling
        out += _SCALE_HEAD.pack(1, tr.N, tr.M, tr.seed) + pack_indices(tr.indices, tr.M)
    return out


def parse(data: bytes) -> Bitstream:
    if len(data) < _HEAD.size:
        raise FormatError(f"stream shorter than the {_HEAD.size}-byte header")
    magic, version, digest, pseed, sseed, s, *rest = _HEAD.unpack_from(data)
    psi, (n_sym, n_pay) = tuple(rest[:N_PSI]), rest[N_PSI:]
    if magic != MAGIC:
        raise FormatError("not a VOVB stream")
    if version != VERSION:
        raise FormatError(f"unsupported VOVB version {version}")
    end = _HEAD.size + n_pay
    if len(data) < end:
        raise FormatError(f"payload truncated: need {n_pay} bytes, have {len(data) - _HEAD.size}")
    payload = data[_HEAD.size:end]
    trace = None
    if len(data) > end:
        if len(data) < end + _SCALE_HEAD.size:
            raise FormatError("truncated scaling block header")
        flag, N, M, seed = _SCALE_HEAD.unpack_from(data, end)
        if flag != 1:
            raise FormatError(f"bad scaling flag {flag}")
        if N < 1 or M < 1:
            raise FormatError("scaling block needs N, M >= 1")
        body = data[end + _SCALE_HEAD.size:]
        if len(body) != -(-N * index_bits(M) // 8):
            raise FormatError("scaling index block has the wrong length")
        trace = ScalingTrace(N, M, unpack_indices(body, N, M), seed)
    return Bitstream(digest, pseed, sseed, s, psi, n_sym, payload, trace, version)


def accounting(b: Bitstream, dim: int) -> BitAccounting:
    sb = ib = 0
    if b.scaling is not None:
        ib = b.scaling.side_bits
        sb = SCALE_BLOCK_HEADER_BITS + 8 * len(pack_indices(b.scaling.indices, b.scaling.M))
    return BitAccounting(HEADER_BITS, 8 * len(b.payload), sb, ib, dim)


@dataclass
class EncodeResult:
    bitstream: Bitstream
    x_hat: np.ndarray
    bits: BitAccounting
    model_bits: float
    stage1: OneVector = field(repr=False)


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except StageError:
        raise
    except Exception as e:
        raise StageError(name, e) from e


def encode(net: VectorFieldNet, x, cfg: CodecConfig, scale: tuple[int, int, int] | None = None) -> EncodeResult:
    """Full pipeline; ``scale = (N, M, seed)`` adds the importance-sampling stage.

    ``x_hat`` is produced by running the decoder on the serialized stream.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size != net.config.input_dim:
        raise StageError("input", DomainError(f"signal has {x.size} values, net expects {net.config.input_dim}"))
    spec = cfg.lora_spec(net)
    fit1 = FitConfig(steps=cfg.stage1_steps, batch=cfg.batch, seed=cfg.sampler_seed, eta0=cfg.eta0, eta1=cfg.eta1)
    ov1 = _stage("stage1", fit_vector_stage1, net, x, spec, cfg.k, fit1, proj_seed=cfg.proj_seed)
    fit2 = Stage2Config(steps=cfg.stage2_steps, batch=cfg.batch, q_max=cfg.q_max, seed=cfg.sampler_seed,
                        eta0=cfg.eta0, eta1=cfg.eta1)
    ov2, qc, em = _stage("stage2", fit_stage2, net, ov1, x, cfg.lam, fit2)
    q = quantize(ov2.v, qc.s)
    payload = _stage("entropy-coding", range_encode, q, em)
    b = Bitstream(cfg.digest(), cfg.proj_seed, cfg.sampler_seed, qc.s, tuple(float(p) for p in em.psi),
                  int(q.size), payload)
    if scale is not None:
        N, M, seed = scale
        delta = expand_vector(OneVector(dequantize(q, qc.s), spec, cfg.proj_seed),
                              build_projection(cfg.proj_seed, spec, cfg.k))
        grid = TimeGrid.uniform(N, cfg.eta0, cfg.eta1)
        trace, _ = _stage("scaling", encode_scaled, net.field(delta), x, grid, M, seed)
        b = replace(b, scaling=trace)
    b = parse(serialize(b))
    x_hat = _stage("decode", decode, net, b, cfg)
    return EncodeResult(b, x_hat, accounting(b, x.size), rate_bits(em, q), ov1)


def decode_vector(net: VectorFieldNet, b: Bitstream, cfg: CodecConfig) -> tuple[OneVector, dict]:
    """Entropy-decode and expand; returns the dequantized vector and layer deltas."""
    if b.digest != cfg.digest():
        raise ConfigError(
            f"config digest mismatch: stream {b.digest.hex()} vs config {cfg.digest().hex()}; "
            "decode with the config used at encode time"
        )
    if b.n_symbols != cfg.k:
        raise ConfigError(f"stream carries {b.n_symbols} symbols but k={cfg.k}")
    spec = cfg.lora_spec(net)
    em = EntropyModel(np.array(b.psi), cfg.q_max)
    q = range_decode(b.payload, b.n_symbols, em)
    ov = OneVector(dequantize(q, b.s), spec, b.proj_seed)
    return ov, expand_vector(ov, build_projection(b.proj_seed, spec, cfg.k))


def grid_index(grid: TimeGrid, tau: float) -> int:
    b = np.asarray(grid.boundaries)
    i = int(np.argmin(np.abs(b - tau)))
    if abs(b[i] - tau) > 1e-9:
        raise DomainError(f"tau={tau} is not a grid boundary")
    return i


def decode(net: VectorFieldNet, b: Bitstream, cfg: CodecConfig, tau: float | None = None) -> np.ndarray:
    """Reconstruct a signal; ``tau`` switches to the one-step map early."""
    _, delta = decode_vector(net, b, cfg)
    return reconstruct(net.field(delta), b, cfg, net.config.input_dim, tau)


def reconstruct(vf, b: Bitstream, cfg: CodecConfig, dim: int, tau: float | None = None) -> np.ndarray:
    """Sampling half of :func:`decode` for an already adapted field."""
    if b.scaling is not None:
        grid = TimeGrid.uniform(b.scaling.N, cfg.eta0, cfg.eta1)
        return decode_scaled(vf, b.scaling, grid, dim)
    grid = cfg.grid
    stop = 0 if tau is None else grid_index(grid, tau)
    return ode_decode(initial_state(b.sampler_seed, dim), vf, grid, stop)
