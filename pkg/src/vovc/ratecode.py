"""Quantization, factorized entropy model, rate estimation and range coding.

The entropy model is a univariate monotone CDF built from two tiny layers::

    u  = softplus(h1) * y + b1                 (2 units)
    z1 = u + tanh(a) * tanh(u)
    z  = softplus(h2) . z1 + b2                (scalar)
    c(y) = sigmoid(z)

with ``psi = (h1[2], b1[2], a[2], h2[2], b2)``, nine numbers in total. The
probability of integer symbol ``q`` is ``c(q + 1/2) - c(q - 1/2)``; the mass
outside ``[-q_max - 1/2, q_max + 1/2]`` belongs to the escape symbol.

Frequency tables (coder precision) put ``2 q_max + 2`` entries in a total of
``2**16``: index ``q + q_max`` for in-alphabet symbols, the escape last. Each
entry is ``1 + floor(p * (2**16 - n))`` and the leftover goes to the most
probable entry (lowest index on ties).
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np

from . import _rangecoder_py
from .dynamics import ETA0, ETA1, NumericError
from .net import TrainingError, VectorFieldNet, loss_fm_and_grad, sample_times
from .optim import AdamW, cosine_lr

log = logging.getLogger(__name__)

if os.environ.get("VOVC_PURE_PYTHON"):
    _coder = _rangecoder_py
else:
    try:
        from . import _rangecoder as _coder
    except ImportError:
        _coder = _rangecoder_py

RangeDecodeError = _rangecoder_py.RangeDecodeError
BACKEND = "compiled" if _coder is not _rangecoder_py else "python"
PROB_BITS = _rangecoder_py.PROB_BITS
TOTAL = _rangecoder_py.TOTAL
ESCAPE_BITS = 32
N_PSI = 9


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class QuantConfig:
    s: float
    q_max: int = 64

    def __post_init__(self):
        if not self.s > 0:
            raise ValueError("scale must be positive")
        if self.q_max < 1:
            raise ValueError("q_max must be >= 1")


def round_half_away(y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    return np.sign(y) * np.floor(np.abs(y) + 0.5)


def quantize(v, s: float) -> np.ndarray:
    if not s > 0:
        raise ValueError("scale must be positive")
    return round_half_away(np.asarray(v, dtype=np.float64) / s).astype(np.int64)


def dequantize(symbols, s: float) -> np.ndarray:
    return np.asarray(symbols, dtype=np.float64) * s


def relax_noise(v, s: float, u) -> np.ndarray:
    """Training-time stand-in for quantization, in symbol units."""
    return np.asarray(v, dtype=np.float64) / s + np.asarray(u, dtype=np.float64)


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    # exp of a non-positive argument only, so small tails keep full relative precision
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0, e) / (1.0 + e)


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


@dataclass
class EntropyModel:
    psi: np.ndarray
    q_max: int = 64

    def __post_init__(self):
        self.psi = np.asarray(self.psi, dtype=np.float64).copy()
        if self.psi.shape != (N_PSI,):
            raise ModelError(f"expected {N_PSI} parameters, got {self.psi.shape}")
        if not np.all(np.isfinite(self.psi)):
            raise ModelError("non-finite entropy-model parameters")

    @classmethod
    def init(cls, scale: float = 4.0, q_max: int = 64) -> "EntropyModel":
        """Symmetric logistic-like start with spread about ``scale`` symbols."""
        w2 = 0.5
        w1 = 1.0 / (2.0 * w2 * scale)
        inv_sp = lambda w: np.log(np.expm1(w))
        psi = np.array([inv_sp(w1), inv_sp(w1), 0.0, 0.0, 0.0, 0.0, inv_sp(w2), inv_sp(w2), 0.0])
        return cls(psi, q_max)

    def rounded(self) -> "EntropyModel":
        """The model as a decoder sees it (float32 header values)."""
        return EntropyModel(self.psi.astype(np.float32).astype(np.float64), self.q_max)

    def _unpack(self):
        p = self.psi
        return p[0:2], p[2:4], p[4:6], p[6:8], p[8]

    def logits(self, y):
        """``z(y)`` and the pieces needed for gradients; ``y`` any shape."""
        h1, b1, a, h2, b2 = self._unpack()
        y = np.asarray(y, dtype=np.float64)[..., None]
        w1, w2, g = _softplus(h1), _softplus(h2), np.tanh(a)
        u = w1 * y + b1
        tu = np.tanh(u)
        z1 = u + g * tu
        z = z1 @ w2 + b2
        return z, (y, u, tu, z1, w1, w2, g)

    def _dz(self, cache):
        """``dz/dy`` and ``dz/dpsi`` (trailing axis of 9)."""
        y, u, tu, z1, w1, w2, g = cache
        h1, _, a, h2, _ = self._unpack()
        dz_du = w2 * (1.0 + g * (1.0 - tu * tu))
        dz_dy = np.sum(dz_du * w1, axis=-1)
        dpsi = np.concatenate(
            [
                dz_du * y * _sigmoid(h1),
                dz_du,
                w2 * tu * (1.0 - g * g),
                z1 * _sigmoid(h2),
                np.ones_like(z1[..., :1]),
            ],
            axis=-1,
        )
        return dz_dy, dpsi

    def cdf(self, y) -> np.ndarray:
        return _sigmoid(self.logits(y)[0])

    def likelihood(self, y) -> np.ndarray:
        """``c(y + 1/2) - c(y - 1/2)``, evaluated stably in the tails."""
        zh = self.logits(np.asarray(y) + 0.5)[0]
        zl = self.logits(np.asarray(y) - 0.5)[0]
        return _interval_mass(zl, zh)

    def log2_likelihood_and_grad(self, y):
        """``log2 p(y)`` with gradients wrt ``y`` and ``psi`` (per element)."""
        y = np.asarray(y, dtype=np.float64)
        zh, ch = self.logits(y + 0.5)
        zl, cl = self.logits(y - 0.5)
        p = _interval_mass(zl, zh)
        if np.any(p <= 0) or not np.all(np.isfinite(p)):
            raise ModelError("likelihood underflow")
        dyh, dph = self._dz(ch)
        dyl, dpl = self._dz(cl)
        # d sigma(z)/dz = sigma(z) sigma(-z)
        sh = np.exp(_log_sigmoid(zh) + _log_sigmoid(-zh)) / p
        sl = np.exp(_log_sigmoid(zl) + _log_sigmoid(-zl)) / p
        inv_ln2 = 1.0 / np.log(2.0)
        dy = (sh * dyh - sl * dyl) * inv_ln2
        dpsi = (sh[..., None] * dph - sl[..., None] * dpl) * inv_ln2
        return np.log2(p), dy, dpsi

    def pmf_table(self) -> np.ndarray:
        """Probabilities of ``-q_max..q_max`` then the escape symbol; sums to 1."""
        Q = self.q_max
        edges = np.arange(-Q, Q + 2, dtype=np.float64) - 0.5
        z = self.logits(edges)[0]
        inner = _interval_mass(z[:-1], z[1:])
        esc = np.exp(_log_sigmoid(z[0])) + np.exp(_log_sigmoid(-z[-1]))
        return np.concatenate([inner, [esc]])


def _interval_mass(zl, zh):
    # sigmoid(zh) - sigmoid(zl), flipping sign to stay in the accurate tail
    flip = np.where(zl + zh > 0, -1.0, 1.0)
    return np.abs(_sigmoid(flip * zh) - _sigmoid(flip * zl))


def em_pmf(em: EntropyModel, q) -> np.ndarray:
    """Discrete probability of each symbol; out-of-alphabet symbols get the escape mass."""
    q = np.asarray(q, dtype=np.int64)
    table = em.pmf_table()
    idx = np.where(np.abs(q) <= em.q_max, q + em.q_max, 2 * em.q_max + 1)
    p = table[idx]
    if np.any(p <= 0):
        raise ModelError("pmf underflow")
    return p


def rate_bits(em: EntropyModel, symbols) -> float:
    """Model cross-entropy in bits; escaped symbols add their raw 32-bit value."""
    symbols = np.asarray(symbols, dtype=np.int64)
    if symbols.size == 0:
        return 0.0
    n_esc = int(np.count_nonzero(np.abs(symbols) > em.q_max))
    return float(-np.sum(np.log2(em_pmf(em, symbols))) + ESCAPE_BITS * n_esc)


def freq_table(em: EntropyModel) -> np.ndarray:
    """Cumulative integer frequencies (length ``2 q_max + 3``) summing to ``2**16``."""
    p = em.pmf_table()
    n = p.size
    if n >= TOTAL:
        raise ModelError("alphabet too large for coder precision")
    f = 1 + np.floor(p * (TOTAL - n)).astype(np.int64)
    f[int(np.argmax(f))] += TOTAL - int(f.sum())
    cum = np.zeros(n + 1, dtype=np.uint32)
    cum[1:] = np.cumsum(f)
    return cum


def range_encode(symbols, em: EntropyModel) -> bytes:
    symbols = np.ascontiguousarray(symbols, dtype=np.int64)
    if symbols.size == 0:
        return b""
    if symbols.min() < -(2**31) or symbols.max() >= 2**31:
        raise ModelError("symbol outside the 32-bit escape range")
    return _coder.encode(symbols, freq_table(em), em.q_max)


def range_decode(data: bytes, n: int, em: EntropyModel) -> np.ndarray:
    if n == 0:
        if data:
            raise RangeDecodeError("payload present for empty stream", 0)
        return np.zeros(0, dtype=np.int64)
    out = _coder.decode(np.frombuffer(data, dtype=np.uint8), n, freq_table(em), em.q_max)
    return np.asarray(out, dtype=np.int64)


def fit_entropy_model(y, em: EntropyModel, steps: int = 300, lr: float = 0.05) -> EntropyModel:
    """Maximum-likelihood fit of ``psi`` alone on fixed (relaxed) symbols."""
    em = EntropyModel(em.psi, em.q_max)
    opt = AdamW([em.psi], lr=lr, weight_decay=0.0)
    y = np.asarray(y, dtype=np.float64)
    if y.size == 0:
        return em
    for _ in range(steps):
        _, _, dpsi = em.log2_likelihood_and_grad(y)
        opt.step([-dpsi.sum(axis=0) / y.size])
    return em


@dataclass(frozen=True)
class Stage2Config:
    steps: int = 300
    batch: int = 64
    lr_v: float = 2e-3
    lr_s: float = 1e-2
    lr_psi: float = 2e-2
    q_max: int = 64
    refit_steps: int = 100
    seed: int = 0
    eta0: float = ETA0
    eta1: float = ETA1


def fit_stage2(net: VectorFieldNet, ov, x, lam: float, cfg: Stage2Config, curve: list | None = None):
    """Joint fit of ``v``, ``log s`` and ``psi`` on ``L_FM(v + s u) + lam * bits``.

    Returns ``(OneVector, QuantConfig, EntropyModel)``; ``s`` and ``psi`` are
    rounded to float32 as they are transmitted.
    """
    from .adapt import OneVector, build_projection, loss_and_vector_grad

    x = np.asarray(x, dtype=np.float64).ravel()
    proj = build_projection(ov.proj_seed, ov.spec, ov.k)
    v = ov.v.copy()
    peak = float(np.max(np.abs(v)))
    log_s = np.array([np.log(peak / 16.0 if peak > 0 else 1e-3)])
    rng = np.random.default_rng(cfg.seed)
    em = EntropyModel.init(4.0, cfg.q_max)
    em = fit_entropy_model(v / np.exp(log_s[0]) + rng.uniform(-0.5, 0.5, v.size), em)
    opt_v = AdamW([v], lr=cfg.lr_v, weight_decay=0.0)
    opt_s = AdamW([log_s], lr=cfg.lr_s, weight_decay=0.0)
    opt_psi = AdamW([em.psi], lr=cfg.lr_psi, weight_decay=0.0)
    for step in range(cfg.steps):
        s = float(np.exp(log_s[0]))
        u = rng.uniform(-0.5, 0.5, v.size)
        t = sample_times(rng, cfg.batch, cfg.eta0, cfg.eta1)
        eps = rng.standard_normal((cfg.batch, x.size))
        relaxed = OneVector(v + s * u, ov.spec, ov.proj_seed)
        try:
            l_fm, g_fm = loss_and_vector_grad(net, relaxed, proj, x, t, eps)
            log2p, dy, dpsi = em.log2_likelihood_and_grad(relax_noise(v, s, u))
        except (NumericError, ModelError) as e:
            raise TrainingError("stage-2 fit diverged", step) from e
        bits = -float(np.sum(log2p))
        g_v = g_fm - lam * dy / s
        g_log_s = s * float(g_fm @ u) + lam * float(dy @ v) / s
        # psi only enters the rate, so its scale under Adam is irrelevant; keep
        # fitting it even at lam = 0 so the coded model stays calibrated
        g_psi = -dpsi.sum(axis=0) / v.size
        frac = cosine_lr(1.0, step, cfg.steps)
        opt_v.step([g_v], cfg.lr_v * frac)
        opt_s.step([np.array([g_log_s])], cfg.lr_s * frac)
        opt_psi.step([g_psi], cfg.lr_psi * frac)
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(em.psi)) and np.isfinite(log_s[0])):
            raise TrainingError("stage-2 fit diverged", step)
        if curve is not None:
            curve.append((l_fm, bits))
    qc = QuantConfig(float(np.float32(np.exp(log_s[0]))), cfg.q_max)
    q = quantize(v, qc.s)
    em = fit_entropy_model(q[np.abs(q) <= cfg.q_max], em, steps=cfg.refit_steps, lr=cfg.lr_psi)
    return OneVector(v, ov.spec, ov.proj_seed), qc, em.rounded()
