"""One-vector low-rank adaptation.

Every LoRA factor entry ``theta_j`` (all ``A`` then ``B`` matrices of the
adapted layers, row-major, in ascending layer order) is read from a shared
vector ``v`` of length ``k`` through a seeded signed bucket map::

    theta_j = sign_j * v[bucket_j] / sqrt(size(bucket_j))

Buckets are filled round-robin over a seeded permutation, so sizes differ by
at most one and ``||theta|| == ||v||`` whenever ``k <= P``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .dynamics import ETA0, ETA1, NumericError
from .net import TrainingError, VectorFieldNet, loss_fm_and_grad, sample_times
from .optim import AdamW, cosine_lr
from .prng import PrngStream

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class IntegrityError(ValueError):
    pass


@dataclass(frozen=True)
class LoraSpec:
    rank: int
    adapted_layers: tuple[int, ...]
    shapes: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError("rank must be >= 1")
        if len(self.adapted_layers) != len(self.shapes):
            raise ConfigError("one shape per adapted layer")

    @classmethod
    def for_net(cls, net: VectorFieldNet, rank: int = 1, layers=None) -> "LoraSpec":
        shapes = net.config.layer_shapes
        layers = tuple(range(len(shapes))) if layers is None else tuple(sorted(layers))
        return cls(rank, layers, tuple(shapes[i] for i in layers))

    @property
    def n_params(self) -> int:
        return sum(self.rank * (m + n) for m, n in self.shapes)

    def digest_items(self) -> tuple:
        return (self.rank, self.adapted_layers, self.shapes)


@dataclass(frozen=True)
class HashProjection:
    seed: int
    k: int
    spec: LoraSpec
    buckets: np.ndarray = field(repr=False)
    signs: np.ndarray = field(repr=False)
    col_norms: np.ndarray = field(repr=False)

    @property
    def scale(self) -> np.ndarray:
        """Per-parameter factor ``sign_j / col_norm(bucket_j)``."""
        return self.signs / self.col_norms[self.buckets]


@dataclass
class OneVector:
    v: np.ndarray
    spec: LoraSpec
    proj_seed: int

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=np.float64)
        if not np.all(np.isfinite(self.v)):
            raise NumericError("non-finite adaptation vector")

    @property
    def k(self) -> int:
        return self.v.size


def build_projection(seed: int, spec: LoraSpec, k: int) -> HashProjection:
    if k < 1:
        raise ConfigError("k must be >= 1")
    P = spec.n_params
    words = PrngStream(seed, "hash").integers(0, 0, 2 * P)
    perm = np.argsort(words[:P], kind="stable")
    buckets = np.empty(P, dtype=np.int64)
    buckets[perm] = np.arange(P) % k
    signs = np.where(words[P:] & 1, 1.0, -1.0)
    sizes = np.bincount(buckets, minlength=k)
    col_norms = np.sqrt(np.maximum(sizes, 1)).astype(np.float64)
    return HashProjection(seed, k, spec, buckets, signs, col_norms)


def flatten_params(ov: OneVector, proj: HashProjection) -> np.ndarray:
    """All LoRA factor entries ``theta`` implied by ``v``."""
    _check(ov, proj)
    return ov.v[proj.buckets] * proj.scale


def lora_factors(theta: np.ndarray, spec: LoraSpec) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    out = {}
    off = 0
    r = spec.rank
    for layer, (m, n) in zip(spec.adapted_layers, spec.shapes):
        A = theta[off: off + m * r].reshape(m, r)
        off += m * r
        B = theta[off: off + r * n].reshape(r, n)
        off += r * n
        out[layer] = (A, B)
    return out


def expand_vector(ov: OneVector, proj: HashProjection) -> dict[int, np.ndarray]:
    """Per-layer weight updates ``dW = A @ B``."""
    factors = lora_factors(flatten_params(ov, proj), ov.spec)
    return {layer: A @ B for layer, (A, B) in factors.items()}


def _check(ov: OneVector, proj: HashProjection) -> None:
    if ov.proj_seed != proj.seed or ov.spec != proj.spec or ov.k != proj.k:
        raise IntegrityError("vector and projection disagree on seed, spec or k")


def vector_grad(ov: OneVector, proj: HashProjection, d_delta: dict[int, np.ndarray]) -> np.ndarray:
    """Chain per-layer ``dL/d(dW)`` back to ``dL/dv``."""
    theta = flatten_params(ov, proj)
    factors = lora_factors(theta, ov.spec)
    d_theta = np.empty_like(theta)
    off = 0
    for layer, (A, B) in factors.items():
        g = d_delta[layer]
        dA = g @ B.T
        dB = A.T @ g
        d_theta[off: off + A.size] = dA.ravel()
        off += A.size
        d_theta[off: off + B.size] = dB.ravel()
        off += B.size
    return np.bincount(proj.buckets, weights=d_theta * proj.scale, minlength=proj.k)


def loss_and_vector_grad(net: VectorFieldNet, ov: OneVector, proj: HashProjection, x, t, eps):
    delta = expand_vector(ov, proj)
    loss, grads = loss_fm_and_grad(net, x, t, eps, delta)
    return loss, vector_grad(ov, proj, {i: grads.dW[i] for i in delta})


@dataclass(frozen=True)
class FitConfig:
    steps: int = 400
    batch: int = 64
    lr: float = 1e-2
    weight_decay: float = 1e-4
    init_std: float = 1e-2
    seed: int = 0
    cosine: bool = True
    eta0: float = ETA0
    eta1: float = ETA1


def init_vector(proj: HashProjection, std: float, seed: int) -> np.ndarray:
    v = PrngStream(seed, "vector-init").normal(0, 0, proj.k) * std
    sizes = np.bincount(proj.buckets, minlength=proj.k)
    return np.where(sizes > 0, v, 0.0)


def fit_vector_stage1(net: VectorFieldNet, x, spec: LoraSpec, k: int, cfg: FitConfig,
                      proj_seed: int = 0, curve: list | None = None, init: OneVector | None = None) -> OneVector:
    """Rate-unconstrained fit of ``v``; the base network is never modified."""
    x = np.asarray(x, dtype=np.float64).ravel()
    proj = build_projection(proj_seed, spec, k)
    if init is None:
        ov = OneVector(init_vector(proj, cfg.init_std, cfg.seed), spec, proj_seed)
    else:
        ov = OneVector(init.v.copy(), spec, proj_seed)
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW([ov.v], lr=cfg.lr, weight_decay=cfg.weight_decay)
    for step in range(cfg.steps):
        t = sample_times(rng, cfg.batch, cfg.eta0, cfg.eta1)
        eps = rng.standard_normal((cfg.batch, x.size))
        try:
            loss, g = loss_and_vector_grad(net, ov, proj, x, t, eps)
        except NumericError as e:
            raise TrainingError("stage-1 fit diverged", step) from e
        lr = cosine_lr(cfg.lr, step, cfg.steps) if cfg.cosine else cfg.lr
        opt.step([g], lr)
        if not np.all(np.isfinite(ov.v)):
            raise TrainingError("stage-1 fit diverged", step)
        if curve is not None:
            curve.append(loss)
    return ov
