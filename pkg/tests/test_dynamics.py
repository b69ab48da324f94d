import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vovc.dynamics import (
    DomainError,
    NumericError,
    TimeGrid,
    TrajState,
    analytic_field,
    conditioned_drift,
    gaussian_score,
    interpolate,
    marginal_kernel,
    ode_decode,
    ode_step,
    one_step_map,
    optimal_kernel,
    optimal_vf,
    score_from_vf,
    sde_decode,
    sde_drift,
    sde_kernel,
)

vec = arrays(np.float64, 6, elements=st.floats(-3, 3))
times = st.floats(1e-3, 1 - 1e-3)


@given(vec, vec, times)
@settings(max_examples=100, deadline=None)
def test_one_step_map_inverts_interpolant_under_optimal_field(x, eps, t):
    x_t = interpolate(x, eps, t)
    x_hat = one_step_map(TrajState(x_t, t), analytic_field(x))
    np.testing.assert_allclose(x_hat, x, atol=1e-9)


@given(vec, vec, times)
@settings(max_examples=100, deadline=None)
def test_optimal_field_is_eps_minus_x_on_path(x, eps, t):
    np.testing.assert_allclose(optimal_vf(interpolate(x, eps, t), t, x), eps - x, atol=1e-8)


@given(vec, vec, times)
@settings(max_examples=100, deadline=None)
def test_conditioned_drift_matches_sde_drift_under_optimal_field(x_t, x, t):
    a = conditioned_drift(x_t, t, x)
    b = sde_drift(x_t, t, optimal_vf(x_t, t, x))
    np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-10)


@given(vec, vec, times)
@settings(max_examples=50, deadline=None)
def test_score_from_optimal_field_is_gaussian_score(x_t, x, t):
    np.testing.assert_allclose(score_from_vf(optimal_vf(x_t, t, x), x_t, t), gaussian_score(x_t, x, t),
                               rtol=1e-9, atol=1e-9)


@given(vec, vec, st.floats(0.05, 0.95), st.floats(1e-3, 0.04))
@settings(max_examples=50, deadline=None)
def test_optimal_kernel_is_sde_kernel_of_optimal_field(x_t, x, t, dt):
    a = optimal_kernel(x_t, t, dt, x)
    b = sde_kernel(x_t, t, dt, analytic_field(x))
    np.testing.assert_allclose(a.mean, b.mean, rtol=1e-12, atol=1e-12)
    assert a.var == b.var


def test_ode_decode_exact_for_analytic_field():
    rng = np.random.default_rng(0)
    x, x1 = rng.uniform(size=32), rng.normal(size=32)
    grid = TimeGrid.uniform(50)
    for stop in (0, 10, 50):
        np.testing.assert_allclose(ode_decode(x1, analytic_field(x), grid, stop), x, rtol=1e-9, atol=1e-12)


def test_sde_decode_uses_supplied_noise():
    x = np.array([0.3, 0.7])
    grid = TimeGrid.uniform(20)
    a = sde_decode(np.zeros(2), analytic_field(x), grid, lambda n: np.full(2, 0.1 * n))
    b = sde_decode(np.zeros(2), analytic_field(x), grid, lambda n: np.full(2, 0.1 * n))
    assert np.array_equal(a, b)
    np.testing.assert_allclose(a, x, atol=1e-9)


def test_marginal_kernel_matches_interpolant_law():
    k = marginal_kernel(np.array([2.0]), 0.25)
    assert k.mean[0] == 1.5 and k.var == 0.0625


def test_grid_and_domain_errors():
    with pytest.raises(DomainError):
        TimeGrid((0.1, 0.1))
    with pytest.raises(DomainError):
        TimeGrid.uniform(0)
    with pytest.raises(DomainError):
        interpolate(np.zeros(2), np.zeros(3), 0.5)
    with pytest.raises(DomainError):
        optimal_vf(np.zeros(2), 0.0, np.zeros(2))
    with pytest.raises(DomainError):
        sde_kernel(np.zeros(2), 1.0, 0.1, lambda y, t: y)
    with pytest.raises(DomainError):
        ode_step(TrajState(np.zeros(2), 0.1), 0.5, lambda y, t: y)


def test_non_finite_field_raises():
    with pytest.raises(NumericError):
        ode_step(TrajState(np.zeros(2), 0.5), 0.1, lambda y, t: np.full_like(y, np.nan))


def test_uniform_grid_endpoints():
    g = TimeGrid.uniform(100)
    assert g.t(0) == pytest.approx(1e-3) and g.t(100) == pytest.approx(1 - 1e-3)
    assert g.n_steps == 100
