"""Small time-conditioned MLP vector field with hand-written reverse mode.

The network stands in for a frozen pretrained generator: ``v(x_t, t)`` maps a
noisy signal and a time to a velocity. Dense layers compute ``h @ W + b`` with
``W`` of shape ``(n_in, n_out)``; an optional per-layer ``delta`` is added to
``W`` (low-rank adaptations are materialised by :mod:`vovc.adapt`).
"""

from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .dynamics import ETA0, ETA1, NumericError
from .optim import AdamW, cosine_lr
from .prng import PrngStream

log = logging.getLogger(__name__)

CKPT_MAGIC = b"VFNN"
CKPT_VERSION = 1

Delta = Mapping[int, np.ndarray]


class TrainingError(RuntimeError):
    def __init__(self, msg: str, step: int | None = None):
        super().__init__(msg if step is None else f"{msg} (step {step})")
        self.step = step


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    input_dim: int = 256
    hidden_dims: tuple[int, ...] = (256, 256, 256)
    time_embed_dim: int = 16
    activation: str = "silu"
    seed: int = 0
    zero_output: bool = True
    precondition: bool = True
    data_mean: float = 0.5
    data_std: float = 0.5

    def __post_init__(self):
        dims = (self.input_dim, self.time_embed_dim, *self.hidden_dims)
        if any(d < 1 for d in dims) or not self.hidden_dims:
            raise ValueError("all network dims must be >= 1")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.data_std <= 0:
            raise ValueError("data_std must be positive")

    @classmethod
    def for_corpus(cls, corpus: Sequence[np.ndarray], **kw) -> "NetConfig":
        """Config whose preconditioning constants match the corpus pixel statistics."""
        data = np.stack([np.asarray(c, dtype=np.float64).ravel() for c in corpus])
        kw.setdefault("input_dim", data.shape[1])
        std = float(data.std()) if data.size > 1 else 1.0
        return cls(data_mean=float(data.mean()), data_std=max(std, 1e-3), **kw)

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = [self.input_dim + self.time_embed_dim, *self.hidden_dims, self.input_dim]
        return list(zip(dims[:-1], dims[1:]))


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    batch: int = 64
    lr: float = 1.5e-3
    weight_decay: float = 1e-4
    seed: int = 0
    cosine: bool = True
    eta0: float = ETA0
    eta1: float = ETA1


@dataclass
class GradReport:
    max_rel_err: float
    checked_params: int


def _silu(a):
    s = 1.0 / (1.0 + np.exp(-a))
    return a * s, s


def _silu_grad(a, s):
    return s * (1.0 + a * (1.0 - s))


def _tanh(a):
    y = np.tanh(a)
    return y, y


def _tanh_grad(a, y):
    return 1.0 - y * y


def _identity(a):
    return a, None


def _identity_grad(a, _):
    return np.ones_like(a)


_ACTIVATIONS = {
    "silu": (_silu, _silu_grad),
    "tanh": (_tanh, _tanh_grad),
    "linear": (_identity, _identity_grad),
}


def precond_coeffs(t, mean: float, std: float):
    """``(c_in, c_skip, c_out)`` with ``v = -mean + c_skip y + c_out F(c_in y, t)``.

    ``y = x_t - (1 - t) mean``. ``c_skip`` is the least-squares linear
    velocity for N(mean, std^2) data and ``c_out`` the residual scale, so the
    MLP ``F`` sees unit-variance inputs and targets at every ``t``.
    """
    t = np.asarray(t, dtype=np.float64)
    var = t * t + (1.0 - t) ** 2 * std * std
    root = np.sqrt(var)
    return 1.0 / root, (t - (1.0 - t) * std * std) / var, std / root


def time_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal features ``[sin(w_i t), cos(w_i t)]``, ``w`` geometric in [1, 32]."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    freqs = 2.0 ** np.linspace(0.0, 5.0, dim // 2)
    arg = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


@dataclass
class NetGrads:
    dW: list[np.ndarray]
    db: list[np.ndarray]
    dgate: np.ndarray

    def flat_list(self) -> list[np.ndarray]:
        out = []
        for gw, gb in zip(self.dW, self.db):
            out += [gw, gb]
        return out + [self.dgate]


@dataclass
class VectorFieldNet:
    """Dense stack plus a learned time gate on the preconditioning skip.

    ``gate`` holds ``time_embed_dim`` weights and one bias; the skip
    coefficient is ``c_skip(t) + temb(t) . gate[:-1] + gate[-1]``.
    """

    config: NetConfig
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    gate: np.ndarray

    @classmethod
    def init(cls, config: NetConfig) -> "VectorFieldNet":
        stream = PrngStream(config.seed, "net-init")
        weights, biases = [], []
        shapes = config.layer_shapes
        for i, (n_in, n_out) in enumerate(shapes):
            if i == len(shapes) - 1 and config.zero_output:
                w = np.zeros((n_in, n_out))
            else:
                w = stream.normal(i, 0, n_in * n_out).reshape(n_in, n_out) / np.sqrt(n_in)
            weights.append(w)
            biases.append(np.zeros(n_out))
        return cls(config, weights, biases, np.zeros(config.time_embed_dim + 1)).rounded()

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out + [self.gate]

    def copy(self) -> "VectorFieldNet":
        return VectorFieldNet(self.config, [w.copy() for w in self.weights],
                              [b.copy() for b in self.biases], self.gate.copy())

    def rounded(self) -> "VectorFieldNet":
        """Parameters snapped to float32 so a saved checkpoint reloads bit-exactly."""
        f = lambda a: a.astype(np.float32).astype(np.float64)
        return VectorFieldNet(self.config, [f(w) for w in self.weights], [f(b) for b in self.biases], f(self.gate))

    def __call__(self, x_t, t, delta: Delta | None = None) -> np.ndarray:
        return forward(self, x_t, t, delta)

    def field(self, delta: Delta | None = None):
        """Closure ``(x_t, t) -> v`` for the samplers in :mod:`vovc.dynamics`."""
        return lambda x_t, t: forward(self, x_t, t, delta)


def _effective_weight(net: VectorFieldNet, i: int, delta: Delta | None) -> np.ndarray:
    if delta is not None and i in delta:
        return net.weights[i] + delta[i]
    return net.weights[i]


def _forward_cache(net: VectorFieldNet, x_t: np.ndarray, t, delta: Delta | None):
    cfg = net.config
    act, _ = _ACTIVATIONS[cfg.activation]
    x_t = np.asarray(x_t, dtype=np.float64)
    squeeze = x_t.ndim == 1
    x2 = np.atleast_2d(x_t)
    if x2.shape[1] != cfg.input_dim:
        raise ValueError(f"dimension mismatch: expected {cfg.input_dim}, got {x2.shape[1]}")
    tt = np.broadcast_to(np.atleast_1d(np.asarray(t, dtype=np.float64)), (x2.shape[0],))
    temb = time_embedding(tt, cfg.time_embed_dim)
    if cfg.precondition:
        c_in, c_skip, c_out = precond_coeffs(tt, cfg.data_mean, cfg.data_std)
        c_skip = c_skip + temb @ net.gate[:-1] + net.gate[-1]
        y = x2 - (1.0 - tt)[:, None] * cfg.data_mean
        h = np.concatenate([c_in[:, None] * y, temb], axis=1)
    else:
        c_in = c_skip = c_out = y = None
        h = np.concatenate([x2, temb], axis=1)
    inputs, pre, aux = [], [], []
    last = net.n_layers - 1
    for i in range(net.n_layers):
        inputs.append(h)
        a = h @ _effective_weight(net, i, delta) + net.biases[i]
        if i == last:
            h = a
            pre.append(a)
            aux.append(None)
        else:
            h, s = act(a)
            pre.append(a)
            aux.append(s)
    if cfg.precondition:
        h = c_out[:, None] * h + c_skip[:, None] * y - cfg.data_mean
    return h, (inputs, pre, aux, (c_in, c_skip, c_out, y, temb)), squeeze


def forward(net: VectorFieldNet, x_t, t, delta: Delta | None = None) -> np.ndarray:
    out, _, squeeze = _forward_cache(net, x_t, t, delta)
    return out[0] if squeeze else out


def backward(net: VectorFieldNet, cache, dout: np.ndarray, delta: Delta | None = None,
             need_input: bool = False) -> tuple[NetGrads, np.ndarray | None]:
    """Reverse pass. Returns ``(grads, d_input or None)``.

    ``grads.dW[i]`` is also the gradient with respect to ``delta[i]`` since
    the layer sees ``W + delta``.
    """
    inputs, pre, aux, (c_in, c_skip, c_out, y, temb) = cache
    _, act_grad = _ACTIVATIONS[net.config.activation]
    dW = [None] * net.n_layers
    db = [None] * net.n_layers
    pre_on = net.config.precondition
    g = c_out[:, None] * dout if pre_on else dout
    for i in range(net.n_layers - 1, -1, -1):
        if i != net.n_layers - 1:
            g = g * act_grad(pre[i], aux[i])
        dW[i] = inputs[i].T @ g
        db[i] = g.sum(axis=0)
        if i > 0 or need_input:
            g = g @ _effective_weight(net, i, delta).T
    dgate = np.zeros_like(net.gate)
    if pre_on:
        s = np.sum(dout * y, axis=1)
        dgate[:-1] = temb.T @ s
        dgate[-1] = s.sum()
    d_in = None
    if need_input:
        d_in = g[:, : net.config.input_dim]
        if pre_on:
            d_in = c_in[:, None] * d_in + c_skip[:, None] * dout
    return NetGrads(dW, db, dgate), d_in


def loss_fm_and_grad(net: VectorFieldNet, x, t, eps, delta: Delta | None = None):
    """Flow-matching loss ``mean_b ||v(x_t, t) - (eps - x)||^2`` and its gradient.

    ``x`` is one signal ``(D,)`` or a batch ``(B, D)`` aligned with ``eps``.
    Returns ``(loss, grads)``; with ``delta`` given, ``grads.dW[i]`` doubles as
    the gradient for ``delta[i]``.
    """
    eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
    x = np.asarray(x, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    if eps.shape[0] == 0:
        raise ValueError("empty batch")
    x_t = (1.0 - t)[:, None] * x + t[:, None] * eps
    target = eps - x
    out, cache, _ = _forward_cache(net, x_t, t, delta)
    r = out - target
    B = eps.shape[0]
    loss = float(np.sum(r * r) / B)
    if not np.isfinite(loss):
        raise NumericError("non-finite flow-matching loss")
    grads, _ = backward(net, cache, 2.0 * r / B, delta)
    return loss, grads


def sample_times(rng: np.random.Generator, n: int, eta0: float = ETA0, eta1: float = ETA1) -> np.ndarray:
    return rng.uniform(eta0, 1.0 - eta1, size=n)


def train_base(corpus: Sequence[np.ndarray], cfg: TrainConfig, net_cfg: NetConfig | None = None,
               net: VectorFieldNet | None = None, loss_log: list | None = None) -> VectorFieldNet:
    """Flow-matching pretraining on a corpus of flattened signals."""
    data = np.stack([np.asarray(c, dtype=np.float64).ravel() for c in corpus])
    if data.shape[0] == 0:
        raise ValueError("empty corpus")
    if net is None:
        net_cfg = net_cfg or NetConfig.for_corpus(data)
        net = VectorFieldNet.init(net_cfg)
    net = net.copy()
    if cfg.steps == 0:
        return net
    rng = np.random.default_rng(cfg.seed)
    params = net.params()
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    for step in range(cfg.steps):
        idx = rng.integers(0, data.shape[0], size=cfg.batch)
        t = sample_times(rng, cfg.batch, cfg.eta0, cfg.eta1)
        eps = rng.standard_normal((cfg.batch, data.shape[1]))
        try:
            loss, grads = loss_fm_and_grad(net, data[idx], t, eps)
        except NumericError as e:
            raise TrainingError("training diverged", step) from e
        lr = cosine_lr(cfg.lr, step, cfg.steps) if cfg.cosine else cfg.lr
        opt.step(grads.flat_list(), lr)
        if loss_log is not None:
            loss_log.append(loss)
        if step % 500 == 0:
            log.debug("train_base step %d loss %.5f", step, loss)
    return net.rounded()


def relative_error(a, b, floor: float = 1e-7) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def check_gradient(loss_fn, params: list[np.ndarray], grads: list[np.ndarray], n_probe: int = 64,
                   h: float = 1e-4, seed: int = 0) -> GradReport:
    """Central differences on ``n_probe`` random entries of ``params``.

    ``loss_fn()`` recomputes the loss from the (in-place perturbed) params.
    """
    rng = np.random.default_rng(seed)
    sizes = np.array([p.size for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    picks = rng.choice(offsets[-1], size=min(n_probe, offsets[-1]), replace=False)
    worst = 0.0
    for flat in picks:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        j = int(flat - offsets[k])
        p = params[k].reshape(-1)
        old = p[j]
        p[j] = old + h
        lp = loss_fn()
        p[j] = old - h
        lm = loss_fn()
        p[j] = old
        num = (lp - lm) / (2 * h)
        worst = max(worst, float(relative_error(grads[k].reshape(-1)[j], num)))
    return GradReport(max_rel_err=worst, checked_params=len(picks))


def grad_check(net: VectorFieldNet, x=None, delta: Delta | None = None, tolerance: float = 1e-3,
               n_probe: int = 64, batch: int = 8, seed: int = 0, backward_fn=None) -> GradReport:
    """Analytic vs finite-difference gradients of the flow-matching loss.

    Checks base parameters, or the ``delta`` matrices when given.
    ``backward_fn`` substitutes the analytic gradient (fault injection).
    """
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    rng = np.random.default_rng(seed)
    D = net.config.input_dim
    x = rng.uniform(0, 1, D) if x is None else np.asarray(x, dtype=np.float64)
    t = sample_times(rng, batch)
    eps = rng.standard_normal((batch, D))
    net = net.copy()
    fn = backward_fn or loss_fm_and_grad
    if delta is not None:
        delta = {i: np.array(d, dtype=np.float64) for i, d in delta.items()}
    _, g = fn(net, x, t, eps, delta)
    if delta is None:
        params = net.params()
        grads = g.flat_list()
    else:
        keys = sorted(delta)
        params = [delta[i] for i in keys]
        grads = [g.dW[i] for i in keys]
    loss_fn = lambda: loss_fm_and_grad(net, x, t, eps, delta)[0]
    return check_gradient(loss_fn, params, grads, n_probe=n_probe, seed=seed)


_ACT_CODES = {"silu": 0, "tanh": 1, "linear": 2}
# input_dim, time_embed_dim, n_hidden, activation, zero_output, precondition, seed, data_mean, data_std
_CFG_FMT = "<IIIBBBQdd"


def save_checkpoint(net: VectorFieldNet) -> bytes:
    cfg = net.config
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<H", CKPT_VERSION))
    buf.write(struct.pack(_CFG_FMT, cfg.input_dim, cfg.time_embed_dim, len(cfg.hidden_dims),
                          _ACT_CODES[cfg.activation], int(cfg.zero_output), int(cfg.precondition),
                          cfg.seed, cfg.data_mean, cfg.data_std))
    buf.write(struct.pack(f"<{len(cfg.hidden_dims)}I", *cfg.hidden_dims))
    for w, b in zip(net.weights, net.biases):
        buf.write(w.astype("<f4").tobytes())
        buf.write(b.astype("<f4").tobytes())
    buf.write(net.gate.astype("<f4").tobytes())
    return buf.getvalue()


def load_checkpoint(data: bytes) -> VectorFieldNet:
    if data[:4] != CKPT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    try:
        (version,) = struct.unpack_from("<H", data, 4)
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        off = 6
        d, te, nh, act, zero, pre, seed, mean, std = struct.unpack_from(_CFG_FMT, data, off)
        off += struct.calcsize(_CFG_FMT)
        hidden = struct.unpack_from(f"<{nh}I", data, off)
        off += 4 * nh
        act_name = {v: k for k, v in _ACT_CODES.items()}[act]
        cfg = NetConfig(d, tuple(hidden), te, act_name, seed, bool(zero), bool(pre), mean, std)
        weights, biases = [], []
        for n_in, n_out in cfg.layer_shapes:
            w = np.frombuffer(data, "<f4", n_in * n_out, off).reshape(n_in, n_out)
            off += 4 * n_in * n_out
            b = np.frombuffer(data, "<f4", n_out, off)
            off += 4 * n_out
            weights.append(w.astype(np.float64))
            biases.append(b.astype(np.float64))
        gate = np.frombuffer(data, "<f4", te + 1, off).astype(np.float64)
        off += 4 * (te + 1)
    except (struct.error, ValueError, KeyError) as e:
        raise CheckpointError(f"truncated or corrupt checkpoint: {e}") from e
    if off != len(data):
        raise CheckpointError("trailing bytes in checkpoint")
    return VectorFieldNet(cfg, weights, biases, gate)
