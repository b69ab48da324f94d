import math

import numpy as np
import pytest

from vovc.dynamics import TimeGrid, analytic_field
from vovc.evaluation import (
    bound_check,
    constant_perturbation_field,
    doob_check,
    dp_sweep,
    early_stop_error,
    growing_error_field,
    is_kernel_check,
    marginal_check,
    mse,
    ode_sde_endpoint,
    psnr,
    radial_spectrum,
    rows_to_csv,
    spectrum_distance,
)


def test_psnr_and_mse():
    x = np.zeros(4)
    assert psnr(x, x) == math.inf
    assert mse(x, np.full(4, 0.1)) == pytest.approx(0.01)
    assert psnr(x, np.full(4, 0.1)) == pytest.approx(20.0)


def test_spectrum_distance_zero_for_identity():
    img = np.random.default_rng(0).uniform(size=(16, 16))
    assert spectrum_distance(img, img) == 0.0
    assert radial_spectrum(img).ndim == 1


def test_sweep_with_analytic_field_is_exact_everywhere():
    rng = np.random.default_rng(1)
    x, x1 = rng.uniform(size=16), rng.normal(size=16)
    res = dp_sweep(analytic_field(x), x, x1, TimeGrid.uniform(40))
    assert len(res.rows) == 41
    assert np.all(np.diff(res.taus) > 0)
    assert np.max(res.mse) < 1e-20


def test_growing_error_field_has_interior_optimum():
    rng = np.random.default_rng(2)
    x, x1 = rng.uniform(size=16), rng.normal(size=16)
    res = dp_sweep(growing_error_field(x, x1), x, x1, TimeGrid.uniform(200))
    assert res.taus[0] < res.best_tau < res.taus[-1]
    assert res.mse.min() < min(res.mse[0], res.mse[-1])


def test_constant_perturbation_error_is_minus_tau_c():
    rng = np.random.default_rng(3)
    x, x1, c = rng.uniform(size=8), rng.normal(size=8), rng.normal(size=8)
    for tau in (0.1, 0.5, 0.9):
        e = early_stop_error(constant_perturbation_field(x, c), x, x1, tau)
        np.testing.assert_allclose(e, -tau * c, atol=1e-12)
        rep = bound_check(constant_perturbation_field(x, c), x, x1, tau, probes=16)
        assert rep.measured_delta == pytest.approx(tau * np.linalg.norm(c), rel=1e-9)
        assert rep.holds()


def test_bound_is_vacuous_for_analytic_field():
    rng = np.random.default_rng(4)
    x, x1 = rng.uniform(size=8), rng.normal(size=8)
    rep = bound_check(analytic_field(x), x, x1, 0.4, probes=16)
    assert rep.measured_delta < 1e-12 and rep.bound_value < 1e-12
    assert rep.holds()


def test_is_check_small():
    s = is_kernel_check(M=256, outer_trials=400, seed=3)
    assert abs(s.z) < 4
    assert 0.8 < s.var_ratio < 1.2


def test_marginal_check_small():
    for row in marginal_check(np.array([1.0]), particles=3000, n_steps=300, seed=1):
        assert abs(row.z) < 4 and abs(row.var_ratio - 1) < 0.1


def test_doob_check_small():
    s = doob_check(particles=500, n_steps=100, seed=2)
    assert abs(s.z) < 4 and s.symbolic_rel_err < 1e-10


def test_ode_endpoint_matches_sde_mean():
    ode, mean, se = ode_sde_endpoint(np.array([0.3, 0.8]), particles=2000, n_steps=300)
    assert np.all(np.abs(ode - mean) < 4 * se)


def test_checks_are_seed_deterministic():
    a = rows_to_csv(marginal_check(np.array([1.0]), particles=200, n_steps=50, seed=9))
    b = rows_to_csv(marginal_check(np.array([1.0]), particles=200, n_steps=50, seed=9))
    assert a == b
    assert a.splitlines()[0] == "t,mean,var,target_mean,target_var,se"
