"""Metrics, the early-stopping sweep, the reconstruction-error bound verifier
and the Monte-Carlo oracles.

Every routine is seed-deterministic and returns plain dataclasses that can be
written with :func:`rows_to_csv`.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .dynamics import (
    ETA0,
    ETA1,
    NumericError,
    TimeGrid,
    TrajState,
    VectorField,
    analytic_field,
    conditioned_drift,
    kernel_var,
    marginal_kernel,
    ode_decode,
    ode_step,
    one_step_map,
    optimal_kernel,
    optimal_vf,
    sde_drift,
    sde_kernel,
)
from .prng import PrngStream, normals
from .scaling import selection_step


def mse(x, x_hat) -> float:
    x, x_hat = np.asarray(x, dtype=np.float64), np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_hat.shape}")
    return float(np.mean((x - x_hat) ** 2))


def psnr(x, x_hat, peak: float = 1.0) -> float:
    """PSNR in dB; ``inf`` when the signals are identical."""
    if not peak > 0:
        raise ValueError("peak must be positive")
    m = mse(x, x_hat)
    return math.inf if m == 0 else 10.0 * math.log10(peak * peak / m)


def radial_spectrum(img) -> np.ndarray:
    """Radially averaged log power spectrum of a square image."""
    img = np.asarray(img, dtype=np.float64)
    p = np.abs(np.fft.fftshift(np.fft.fft2(img - img.mean()))) ** 2
    h, w = img.shape
    yy, xx = np.indices((h, w))
    r = np.hypot(yy - h // 2, xx - w // 2).astype(int)
    sums = np.bincount(r.ravel(), p.ravel())
    counts = np.bincount(r.ravel())
    return np.log10(sums / np.maximum(counts, 1) + 1e-12)


def spectrum_distance(x, x_hat) -> float:
    """RMS gap between radial log spectra; a crude realism diagnostic."""
    return float(np.sqrt(np.mean((radial_spectrum(x) - radial_spectrum(x_hat)) ** 2)))


@dataclass(frozen=True)
class SweepRow:
    tau: float
    mse: float
    psnr: float


@dataclass(frozen=True)
class SweepResult:
    rows: tuple[SweepRow, ...]

    @property
    def taus(self) -> np.ndarray:
        return np.array([r.tau for r in self.rows])

    @property
    def mse(self) -> np.ndarray:
        return np.array([r.mse for r in self.rows])

    @property
    def best_tau(self) -> float:
        return self.rows[int(np.argmin(self.mse))].tau


def dp_sweep(vf: VectorField, x, x1, grid: TimeGrid, peak: float = 1.0) -> SweepResult:
    """Euler down to each grid time ``tau``, then the one-step map; one row per boundary."""
    x = np.asarray(x, dtype=np.float64).ravel()
    state = TrajState(np.array(x1, dtype=np.float64), grid.t(grid.n_steps))
    rows = []
    for n in range(grid.n_steps, -1, -1):
        state.t = grid.t(n)
        x_hat = one_step_map(state, vf)
        rows.append(SweepRow(grid.t(n), mse(x, x_hat), psnr(x, x_hat, peak)))
        if n > 0:
            state = ode_step(state, grid.dt(n), vf)
    return SweepResult(tuple(reversed(rows)))


def early_stop_error(vf: VectorField, x, x1, tau: float, n_steps: int = 200) -> np.ndarray:
    """``one_step_map`` output at ``tau`` minus ``x`` after Euler from ``t = 1``."""
    x = np.asarray(x, dtype=np.float64).ravel()
    state = TrajState(np.array(x1, dtype=np.float64).ravel(), 1.0)
    ts = np.linspace(tau, 1.0, n_steps + 1)
    for j in range(n_steps, 0, -1):
        state = ode_step(state, ts[j] - ts[j - 1], vf)
        state.t = ts[j - 1]
    return one_step_map(state, vf) - x


def constant_perturbation_field(x, c) -> VectorField:
    """Analytic field plus a constant ``c``; its early-stop error is exactly ``-tau c``."""
    vf = analytic_field(x)
    c = np.asarray(c, dtype=np.float64)
    return lambda y, t: vf(y, t) + c


def growing_error_field(x, x1, c: float = 1.0, K: float = 10.0, direction=None) -> VectorField:
    """Clean-path field with an error ``c t d`` that the dynamics amplify near ``t = 0``.

    ``v(y, t) = (x1 - x) + c t d - K (1 - t)^2 (y - x_t)`` with ``x_t`` the
    clean path. Switching at ``tau = 1`` pays the full ``c`` error in the jump;
    integrating close to 0 lets the off-path term blow the accumulated drift
    up by about ``exp(K / 3)``, so the best switch lies in between.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    x1 = np.asarray(x1, dtype=np.float64).ravel()
    d = np.ones_like(x) / math.sqrt(x.size) if direction is None else np.asarray(direction, dtype=np.float64)
    return lambda y, t: (x1 - x) + c * t * d - K * (1.0 - t) ** 2 * (y - ((1.0 - t) * x + t * x1))


@dataclass(frozen=True)
class BoundReport:
    tau: float
    measured_delta: float
    bound_value: float
    L_hat: float
    e_integral: float
    e_tau: float
    L_realized: float

    @property
    def certified(self) -> bool:
        """The sampled Lipschitz estimate covers what the trajectory actually saw."""
        return self.L_realized <= self.L_hat

    def holds(self, atol: float = 1e-9) -> bool:
        return self.measured_delta <= self.bound_value + atol


def lipschitz_estimate(vf: VectorField, x, x1, tau: float, probes: int = 256, seed: int = 0,
                       safety: float = 1.5, h: float = 1e-4) -> float:
    """Largest central-difference directional derivative over probe points on ``[tau, 1]``."""
    x = np.asarray(x, dtype=np.float64).ravel()
    x1 = np.asarray(x1, dtype=np.float64).ravel()
    ts = tau + (1.0 - tau) * PrngStream(seed, "lip-t").uniform(0, 0, probes)
    dirs = normals(seed, "lip-dir", np.arange(probes), 0, x.size)
    best = 0.0
    for t, d in zip(ts, dirs):
        d = d / np.linalg.norm(d)
        y = (1.0 - t) * x + t * x1
        g = np.linalg.norm(vf(y + h * d, t) - vf(y - h * d, t)) / (2.0 * h)
        best = max(best, float(g))
    L = safety * best
    if not math.isfinite(L):
        raise NumericError("non-finite Lipschitz estimate")
    return L


def bound_check(vf: VectorField, x, x1, tau: float, quad_points: int = 201, probes: int = 256,
                seed: int = 0) -> BoundReport:
    """Measured early-stop error against ``(tau L + 1) e^{L(1-tau)} int ||e_t|| + tau ||e_tau||``.

    The trajectory is Euler-integrated from ``t = 1`` on the quadrature nodes.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    x = np.asarray(x, dtype=np.float64).ravel()
    x1 = np.asarray(x1, dtype=np.float64).ravel()
    ts = np.linspace(tau, 1.0, quad_points)
    clean = lambda t: (1.0 - t) * x + t * x1
    e = np.array([np.linalg.norm(vf(clean(t), t) - (x1 - x)) for t in ts])
    e_int = float(np.sum(0.5 * (e[1:] + e[:-1]) * np.diff(ts)))
    L_hat = lipschitz_estimate(vf, x, x1, tau, probes, seed)
    state = TrajState(x1.copy(), 1.0)
    L_real = 0.0
    for j in range(quad_points - 1, 0, -1):
        gap = np.linalg.norm(state.x - clean(ts[j]))
        if gap > 1e-12:
            diff = np.linalg.norm(vf(state.x, ts[j]) - vf(clean(ts[j]), ts[j]))
            L_real = max(L_real, float(diff / gap))
        state = ode_step(state, ts[j] - ts[j - 1], vf)
        state.t = ts[j - 1]
    delta = float(np.linalg.norm(one_step_map(state, vf) - x))
    bound = (tau * L_hat + 1.0) * math.exp(L_hat * (1.0 - tau)) * e_int + tau * e[0]
    return BoundReport(float(tau), delta, float(bound), float(L_hat), e_int, float(e[0]), L_real)


@dataclass(frozen=True)
class KernelStats:
    M: int
    trials: int
    mean: float
    var: float
    target_mean: float
    target_var: float
    proposal_mean: float
    se: float

    @property
    def z(self) -> float:
        return (self.mean - self.target_mean) / self.se

    @property
    def var_ratio(self) -> float:
        return self.var / self.target_var


def is_kernel_check(t_n: float = 0.5, dt: float = 0.1, x: float = 1.0, M: int = 1024,
                    outer_trials: int = 1000, seed: int = 0, x_t: float = 0.5) -> KernelStats:
    """Selected-candidate moments versus the optimal kernel, proposal field ``0``."""
    picks = selection_step(x_t, t_n, dt, x, M, outer_trials, seed)
    targ = optimal_kernel(np.array([x_t]), t_n, dt, np.array([x]))
    prop = sde_kernel(np.array([x_t]), t_n, dt, lambda y, t: np.zeros_like(y))
    var = float(np.var(picks, ddof=1))
    return KernelStats(M, outer_trials, float(picks.mean()), var, float(targ.mean[0]), targ.var,
                       float(prop.mean[0]), math.sqrt(var / outer_trials))


@dataclass(frozen=True)
class MarginalRow:
    t: float
    mean: float
    var: float
    target_mean: float
    target_var: float
    se: float

    @property
    def z(self) -> float:
        return (self.mean - self.target_mean) / self.se

    @property
    def var_ratio(self) -> float:
        return self.var / self.target_var


def _simulate(x, particles: int, grid: TimeGrid, seed: int, domain: str, drift, record=()):
    """Euler-Maruyama ensemble from ``N(0, I)`` at ``t_N``; returns snapshots by time."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = normals(seed, domain, np.arange(particles), 0, x.size).reshape(particles, x.size)
    snaps = {}
    for n in range(grid.n_steps, 0, -1):
        t, dt = grid.t(n), grid.dt(n)
        if t in record:
            snaps[t] = y.copy()
        noise = normals(seed, domain, np.arange(particles), n, x.size).reshape(particles, x.size)
        y = y - drift(y, t) * dt + math.sqrt(kernel_var(t, dt)) * noise
    snaps[grid.t(0)] = y
    return snaps


def _grid_with(points, n_steps: int, eta0: float, eta1: float) -> TimeGrid:
    b = np.union1d(np.linspace(eta0, 1.0 - eta1, n_steps + 1), np.asarray(points, dtype=np.float64))
    return TimeGrid(tuple(float(v) for v in b), eta0, eta1)


def marginal_check(x, particles: int = 10_000, checkpoints=(0.75, 0.5, 0.25), n_steps: int = 1000,
                   seed: int = 0, eta0: float = ETA0, eta1: float = ETA1) -> list[MarginalRow]:
    """SDE ensemble under the analytic field against ``N((1-t) x, t^2)``.

    Moments are pooled over coordinates after centring each on its target, so
    a 1-D target gives plain per-particle statistics.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    grid = _grid_with(checkpoints, n_steps, eta0, eta1)
    vf = analytic_field(x)
    snaps = _simulate(x, particles, grid, seed, "marginal", lambda y, t: sde_drift(y, t, vf(y, t)),
                      record=set(float(c) for c in checkpoints))
    rows = []
    for t in checkpoints:
        k = marginal_kernel(x, t)
        dev = snaps[float(t)] - k.mean
        var = float(np.var(dev, ddof=1))
        n = dev.size
        rows.append(MarginalRow(float(t), float(k.mean.mean() + dev.mean()), var, float(k.mean.mean()),
                                k.var, math.sqrt(var / n)))
    return rows


@dataclass(frozen=True)
class DoobStats:
    terminal_mean: float
    terminal_var: float
    target: float
    se: float
    symbolic_rel_err: float

    @property
    def z(self) -> float:
        return (self.terminal_mean - self.target) / self.se


def doob_check(x: float = 2.0, particles: int = 1000, n_steps: int = 200, seed: int = 0,
               eta0: float = ETA0, eta1: float = ETA1) -> DoobStats:
    """Simulate the target-conditioned reverse SDE and compare its drift symbolically."""
    xv = np.array([x], dtype=np.float64)
    # the conditioned kernel is unbiased all the way to t = 0, so run there
    grid = TimeGrid(tuple(float(v) for v in np.linspace(0.0, 1.0 - eta1, n_steps + 1)), eta0, eta1)
    snaps = _simulate(xv, particles, grid, seed, "doob", lambda y, t: conditioned_drift(y, t, xv))
    y = snaps[grid.t(0)][:, 0]
    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(10):
        t = float(rng.uniform(0.05, 0.95))
        pt, px = rng.normal(size=4), rng.normal(size=4)
        a = conditioned_drift(pt, t, px)
        b = sde_drift(pt, t, optimal_vf(pt, t, px))
        errs.append(float(np.max(np.abs(a - b)) / np.max(np.abs(b))))
    var = float(np.var(y, ddof=1))
    return DoobStats(float(y.mean()), var, x, math.sqrt(var / particles), max(errs))


def ode_sde_endpoint(x, particles: int = 10_000, n_steps: int = 1000, seed: int = 0):
    """Deterministic ODE endpoint and the SDE ensemble mean at ``t_0`` for the analytic field."""
    x = np.asarray(x, dtype=np.float64).ravel()
    grid = TimeGrid.uniform(n_steps)
    vf = analytic_field(x)
    y = _simulate(x, particles, grid, seed, "endpoint", lambda y, t: sde_drift(y, t, vf(y, t)))[grid.t(0)]
    ode = ode_decode(np.zeros_like(x), vf, grid, stop_index=0)
    return ode, y.mean(axis=0), y.std(axis=0, ddof=1) / math.sqrt(particles)


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def rows_to_csv(rows) -> str:
    """CSV text (header + one line per dataclass row, floats in ``repr`` form)."""
    rows = list(rows)
    buf = io.StringIO()
    if not rows:
        return ""
    names = [f.name for f in fields(rows[0])]
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(names)
    for r in rows:
        d = asdict(r)
        w.writerow([_cell(d[n]) for n in names])
    return buf.getvalue()
