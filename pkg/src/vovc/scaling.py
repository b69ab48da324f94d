"""Encoding-time scaling: shared-seed importance selection along the SDE.

At each step the encoder draws ``M`` candidates from the model kernel
``N(mu_theta, var)``, weights them by ``N(c; mu*, var) / N(c; mu_theta, var)``
against the kernel of the optimal field for the known target, samples one
index from the normalized weights and moves on. Candidates come from
``PrngStream(seed, "cand")`` at counters ``(n, m)`` and the selection uniform
from ``PrngStream(seed, "select")`` at ``(n, 0)``, so the decoder can replay
the chosen path from the indices alone. The last move, from ``t_0`` to 0,
is the deterministic one-step map.

Index block layout (big-endian bit order): indices for ``n = N, N-1, ..., 1``,
each ``ceil(log2 M)`` bits wide, zero-padded to a whole byte.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dynamics import (
    DomainError,
    NumericError,
    TimeGrid,
    TrajState,
    VectorField,
    one_step_map,
    optimal_kernel,
    sde_kernel,
)
from .prng import PrngStream, normals


class IntegrityError(ValueError):
    pass


def index_bits(M: int) -> int:
    if M < 1:
        raise ValueError("M must be >= 1")
    return (M - 1).bit_length()


@dataclass(frozen=True)
class ScalingTrace:
    N: int
    M: int
    indices: tuple[int, ...]
    seed: int

    def __post_init__(self):
        if len(self.indices) != self.N:
            raise IntegrityError(f"trace holds {len(self.indices)} indices for N={self.N}")
        if any(not 0 <= i < self.M for i in self.indices):
            raise IntegrityError("scaling index out of range")

    @property
    def side_bits(self) -> int:
        return self.N * index_bits(self.M)

    def step_index(self, n: int) -> int:
        """Index chosen at step ``n`` (``N`` first)."""
        return self.indices[self.N - n]


def pack_indices(indices, M: int) -> bytes:
    w = index_bits(M)
    if w == 0:
        return b""
    acc = 0
    for i in indices:
        acc = (acc << w) | int(i)
    nbits = w * len(indices)
    pad = (-nbits) % 8
    return (acc << pad).to_bytes((nbits + pad) // 8, "big")


def unpack_indices(data: bytes, N: int, M: int) -> tuple[int, ...]:
    w = index_bits(M)
    if w == 0:
        return (0,) * N
    nbytes = -(-w * N // 8)
    if len(data) != nbytes:
        raise IntegrityError(f"expected {nbytes} index bytes, got {len(data)}")
    acc = int.from_bytes(data, "big") >> (nbytes * 8 - w * N)
    mask = (1 << w) - 1
    return tuple((acc >> (w * (N - 1 - j))) & mask for j in range(N))


def log_importance_weights(cands, mu_theta, mu_star, var: float) -> np.ndarray:
    """``log N(c; mu*, var) - log N(c; mu_theta, var)`` per candidate row."""
    cands = np.atleast_2d(cands)
    d_theta = np.sum((cands - mu_theta) ** 2, axis=-1)
    d_star = np.sum((cands - mu_star) ** 2, axis=-1)
    return (d_theta - d_star) / (2.0 * var)


def normalized_weights(logw) -> np.ndarray:
    logw = np.asarray(logw, dtype=np.float64)
    if not np.all(np.isfinite(logw)):
        raise NumericError("non-finite log importance weight")
    w = np.exp(logw - logw.max())
    total = w.sum()
    if not total > 0:
        raise NumericError("all importance weights vanished")
    return w / total


def importance_weight(cand, x_t, t_n: float, dt: float, x, vf: VectorField, others=None) -> np.ndarray:
    """Normalized weights of ``cand`` (rows) under the step-``t_n`` kernels.

    ``others`` are extra rows sharing the normalization (e.g. the rest of the
    candidate set); only the weights of ``cand`` are returned.
    """
    prop = sde_kernel(x_t, t_n, dt, vf)
    targ = optimal_kernel(x_t, t_n, dt, x)
    cand = np.atleast_2d(cand)
    rows = cand if others is None else np.vstack([cand, np.atleast_2d(others)])
    w = normalized_weights(log_importance_weights(rows, prop.mean, targ.mean, prop.var))
    return w[: len(cand)]


def categorical(weights, u: float) -> int:
    """Inverse-CDF draw in fixed index order; never an argmax."""
    cdf = np.cumsum(weights)
    return int(min(np.searchsorted(cdf, u * cdf[-1], side="right"), len(cdf) - 1))


def initial_state(seed: int, dim: int) -> np.ndarray:
    return PrngStream(seed, "init").normal(0, 0, dim)


def candidates(seed: int, n: int, M: int, mean, var: float) -> np.ndarray:
    """All ``M`` step-``n`` candidates; row ``m`` uses counters ``(n, m)``."""
    noise = normals(seed, "cand", np.full(M, n), np.arange(M), mean.size)
    return mean + math.sqrt(var) * noise


def encode_scaled(vf: VectorField, x, grid: TimeGrid, M: int, seed: int, x1=None):
    """Importance-selection refinement; returns ``(ScalingTrace, x_hat)``."""
    if M < 1:
        raise ValueError("M must be >= 1")
    x = np.asarray(x, dtype=np.float64).ravel()
    state = TrajState(initial_state(seed, x.size) if x1 is None else np.array(x1, dtype=np.float64),
                      grid.t(grid.n_steps))
    chosen = []
    for n in range(grid.n_steps, 0, -1):
        t, dt = grid.t(n), grid.dt(n)
        prop = sde_kernel(state.x, t, dt, vf)
        targ = optimal_kernel(state.x, t, dt, x)
        cands = candidates(seed, n, M, prop.mean, prop.var)
        w = normalized_weights(log_importance_weights(cands, prop.mean, targ.mean, prop.var))
        i = categorical(w, float(PrngStream(seed, "select").uniform(n, 0, 1)[0]))
        chosen.append(i)
        state = TrajState(cands[i], grid.t(n - 1))
    trace = ScalingTrace(grid.n_steps, M, tuple(chosen), seed)
    return trace, one_step_map(state, vf)


def decode_scaled(vf: VectorField, trace: ScalingTrace, grid: TimeGrid, dim: int, x1=None) -> np.ndarray:
    """Replay a trace, regenerating each step's candidates exactly as the encoder did."""
    if trace.N != grid.n_steps:
        raise IntegrityError(f"trace has N={trace.N} but the grid has {grid.n_steps} steps")
    state = TrajState(initial_state(trace.seed, dim) if x1 is None else np.array(x1, dtype=np.float64),
                      grid.t(grid.n_steps))
    for n in range(grid.n_steps, 0, -1):
        prop = sde_kernel(state.x, grid.t(n), grid.dt(n), vf)
        cands = candidates(trace.seed, n, trace.M, prop.mean, prop.var)
        state = TrajState(cands[trace.step_index(n)], grid.t(n - 1))
    return one_step_map(state, vf)


def plain_sde_decode(vf: VectorField, grid: TimeGrid, seed: int, dim: int, x1=None) -> np.ndarray:
    """Seeded Euler-Maruyama decode using candidate 0 of every step."""
    trace = ScalingTrace(grid.n_steps, 1, (0,) * grid.n_steps, seed)
    return decode_scaled(vf, trace, grid, dim, x1)


def selection_step(x_t: float, t_n: float, dt: float, x: float, M: int, trials: int, seed: int,
                   vf: VectorField | None = None) -> np.ndarray:
    """One 1-D selection step repeated ``trials`` times with independent streams.

    The default proposal field is ``vf = 0``, deliberately mismatched.
    """
    if not 0.0 < t_n < 1.0:
        raise DomainError(f"t_n={t_n} outside (0, 1)")
    vf = vf or (lambda y, t: np.zeros_like(y))
    xt = np.array([x_t], dtype=np.float64)
    prop = sde_kernel(xt, t_n, dt, vf)
    targ = optimal_kernel(xt, t_n, dt, np.array([x], dtype=np.float64))
    sd = math.sqrt(prop.var)
    out = np.empty(trials)
    for r in range(trials):
        noise = normals(seed, "cand", np.full(M, r), np.arange(M), 1)[:, 0]
        cands = prop.mean[0] + sd * noise
        logw = ((cands - prop.mean[0]) ** 2 - (cands - targ.mean[0]) ** 2) / (2.0 * prop.var)
        w = normalized_weights(logw)
        out[r] = cands[categorical(w, float(PrngStream(seed, "select").uniform(r, 0, 1)[0]))]
    return out
