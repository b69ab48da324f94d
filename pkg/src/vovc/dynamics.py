"""Closed-form flow/diffusion maths for the linear interpolant.

Time runs from noise at ``t = 1`` to data at ``t = 0``. All functions are pure
and operate on numpy arrays; the last axis is the signal dimension, leading
axes broadcast (a batch of particles is just a 2-D array).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

ETA0 = 1e-3
ETA1 = 1e-3

VectorField = Callable[[np.ndarray, float], np.ndarray]


class DomainError(ValueError):
    """A time or shape argument lies outside where a formula is defined."""


class NumericError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ScheduleCoeffs:
    t: float
    beta: float
    sigma: float
    alpha: float
    var: float


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing boundaries ``t_0 = eta0 < ... < t_N = 1 - eta1``."""

    boundaries: tuple[float, ...]
    eta0: float = ETA0
    eta1: float = ETA1

    def __post_init__(self):
        b = np.asarray(self.boundaries, dtype=np.float64)
        if b.ndim != 1 or b.size < 2:
            raise DomainError("time grid needs at least one step")
        if not np.all(np.diff(b) > 0):
            raise DomainError("time grid must be strictly increasing")
        if b[0] < 0 or b[-1] > 1:
            raise DomainError("time grid must lie in [0, 1]")

    @classmethod
    def uniform(cls, n_steps: int, eta0: float = ETA0, eta1: float = ETA1) -> "TimeGrid":
        if n_steps < 1:
            raise DomainError("n_steps must be >= 1")
        b = np.linspace(eta0, 1.0 - eta1, n_steps + 1)
        return cls(tuple(float(v) for v in b), eta0, eta1)

    @property
    def n_steps(self) -> int:
        return len(self.boundaries) - 1

    def t(self, n: int) -> float:
        return self.boundaries[n]

    def dt(self, n: int) -> float:
        """Size of step ``n``, i.e. ``t_n - t_{n-1}``."""
        return self.boundaries[n] - self.boundaries[n - 1]


@dataclass
class TrajState:
    x: np.ndarray
    t: float


@dataclass(frozen=True)
class KernelParams:
    mean: np.ndarray
    var: float


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape[-1:] != b.shape[-1:]:
        raise DomainError(f"dimension mismatch: {a.shape} vs {b.shape}")


def interpolate(x, eps, t: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    _same_shape(x, eps)
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"t={t} outside [0, 1]")
    return (1.0 - t) * x + t * eps


def optimal_vf(x_t, t: float, x) -> np.ndarray:
    """Minimizer of the flow-matching loss for a point-mass target ``x``."""
    if t <= 0:
        raise DomainError("optimal field undefined at t <= 0")
    x_t = np.asarray(x_t, dtype=np.float64)
    return (x_t - np.asarray(x, dtype=np.float64)) / t


def analytic_field(x) -> VectorField:
    """``optimal_vf`` bound to a target, usable wherever a network field is."""
    x = np.asarray(x, dtype=np.float64)
    return lambda x_t, t: optimal_vf(x_t, t, x)


def schedule_coeffs(t: float) -> ScheduleCoeffs:
    if not 0.0 < t < 1.0:
        raise DomainError(f"t={t} outside (0, 1)")
    return ScheduleCoeffs(
        t=t,
        beta=-1.0 / (1.0 - t),
        sigma=float(np.sqrt(2.0 * t / (1.0 - t))),
        alpha=1.0 - t,
        var=t * t,
    )


def marginal_kernel(x, t: float) -> KernelParams:
    """Law of ``x_t`` given a point-mass target: N((1-t) x, t^2 I)."""
    if not 0.0 < t <= 1.0:
        raise DomainError(f"t={t} outside (0, 1]")
    return KernelParams(mean=(1.0 - t) * np.asarray(x, dtype=np.float64), var=t * t)


def score_from_vf(v, x_t, t: float) -> np.ndarray:
    if t <= 0:
        raise DomainError("score undefined at t <= 0")
    return -(np.asarray(x_t) + (1.0 - t) * np.asarray(v)) / t


def gaussian_score(x_t, x, t: float) -> np.ndarray:
    """Score of ``marginal_kernel(x, t)`` at ``x_t``."""
    return -(np.asarray(x_t) - (1.0 - t) * np.asarray(x)) / (t * t)


def _check_finite(v: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(v)):
        raise NumericError(f"non-finite {what}")
    return v


def ode_step(state: TrajState, dt: float, vf: VectorField) -> TrajState:
    """One explicit Euler step of dx = v dt, backwards in time."""
    if dt <= 0 or state.t - dt < -1e-12:
        raise DomainError("ode_step needs 0 < dt <= t")
    v = _check_finite(np.asarray(vf(state.x, state.t)), "vector field")
    return TrajState(state.x - v * dt, max(state.t - dt, 0.0))


def kernel_var(t: float, dt: float) -> float:
    return 2.0 * t / (1.0 - t) * dt


def sde_drift(x_t, t: float, v) -> np.ndarray:
    """Reverse-time drift ``x/(1-t) + 2 v`` of the marginal-preserving SDE."""
    return np.asarray(x_t) / (1.0 - t) + 2.0 * np.asarray(v)


def sde_kernel(x_t, t: float, dt: float, vf: VectorField) -> KernelParams:
    """Euler-Maruyama transition kernel under a learned field."""
    if not 0.0 < t < 1.0:
        raise DomainError(f"t={t} outside (0, 1)")
    if dt <= 0:
        raise DomainError("dt must be positive")
    x_t = np.asarray(x_t, dtype=np.float64)
    v = _check_finite(np.asarray(vf(x_t, t)), "vector field")
    return KernelParams(mean=x_t - sde_drift(x_t, t, v) * dt, var=kernel_var(t, dt))


def sde_step(state: TrajState, dt: float, vf: VectorField, noise) -> TrajState:
    if state.t >= 1.0:
        raise DomainError("diffusion coefficient diverges at t >= 1")
    k = sde_kernel(state.x, state.t, dt, vf)
    return TrajState(k.mean + np.sqrt(k.var) * np.asarray(noise), state.t - dt)


def optimal_kernel(x_t, t_n: float, dt: float, x) -> KernelParams:
    """Transition kernel of the same SDE driven by the point-mass optimal field."""
    if not 0.0 < t_n < 1.0:
        raise DomainError(f"t_n={t_n} outside (0, 1)")
    if dt <= 0:
        raise DomainError("dt must be positive")
    x_t = np.asarray(x_t, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    mean = x_t - (x_t / (1.0 - t_n) + 2.0 * (x_t - x) / t_n) * dt
    return KernelParams(mean=mean, var=kernel_var(t_n, dt))


def one_step_map(state: TrajState, vf: VectorField) -> np.ndarray:
    """Jump straight to ``t = 0``: ``x_t - t v(x_t, t)``."""
    if not 0.0 <= state.t <= 1.0:
        raise DomainError(f"t={state.t} outside [0, 1]")
    if state.t == 0.0:
        return np.array(state.x, dtype=np.float64)
    v = _check_finite(np.asarray(vf(state.x, state.t)), "vector field")
    return state.x - state.t * v


def doob_drift(x_t, t: float, x) -> np.ndarray:
    """``sigma_t^2 grad log p(x_t | x_0 = x)`` for the Gaussian forward kernel."""
    c = schedule_coeffs(t)
    return c.sigma**2 * gaussian_score(x_t, x, t)


def conditioned_drift(x_t, t: float, x) -> np.ndarray:
    """Reverse drift of the base process conditioned on ending at ``x``."""
    c = schedule_coeffs(t)
    return c.beta * np.asarray(x_t) - doob_drift(x_t, t, x)


def ode_decode(x1, vf: VectorField, grid: TimeGrid, stop_index: int = 0) -> np.ndarray:
    """Euler from ``t_N`` down to ``t_stop``, then one-step map to ``t = 0``."""
    state = TrajState(np.array(x1, dtype=np.float64), grid.t(grid.n_steps))
    for n in range(grid.n_steps, stop_index, -1):
        state = ode_step(state, grid.dt(n), vf)
        state.t = grid.t(n - 1)
    return one_step_map(state, vf)


def sde_decode(x1, vf: VectorField, grid: TimeGrid, noise_fn: Callable[[int], np.ndarray]) -> np.ndarray:
    """Euler-Maruyama with ``noise_fn(n)`` supplying the step-``n`` normals."""
    state = TrajState(np.array(x1, dtype=np.float64), grid.t(grid.n_steps))
    for n in range(grid.n_steps, 0, -1):
        state = sde_step(state, grid.dt(n), vf, noise_fn(n))
        state.t = grid.t(n - 1)
    return one_step_map(state, vf)
