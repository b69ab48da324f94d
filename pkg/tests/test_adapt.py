import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vovc.adapt import (
    ConfigError,
    FitConfig,
    IntegrityError,
    LoraSpec,
    OneVector,
    build_projection,
    expand_vector,
    fit_vector_stage1,
    flatten_params,
    loss_and_vector_grad,
)
from vovc.net import check_gradient, loss_fm_and_grad, sample_times


def spec_for(net, rank=1, layers=None):
    return LoraSpec.for_net(net, rank, layers)


@given(st.integers(0, 2**32), st.integers(1, 600))
@settings(max_examples=40, deadline=None)
def test_bucket_sizes_are_balanced(seed, k):
    spec = LoraSpec(1, (0, 1), ((10, 7), (7, 5)))
    proj = build_projection(seed, spec, k)
    sizes = np.bincount(proj.buckets, minlength=k)
    assert sizes.max() - sizes[sizes > 0].min() <= 1
    assert np.all(proj.buckets < k)


@given(st.integers(0, 2**32), st.data())
@settings(max_examples=40, deadline=None)
def test_projection_preserves_norm_when_k_at_most_p(seed, data):
    spec = LoraSpec(2, (0,), ((6, 5),))
    P = spec.n_params
    k = data.draw(st.integers(1, P))
    proj = build_projection(seed, spec, k)
    v = np.random.default_rng(seed).standard_normal(k)
    theta = flatten_params(OneVector(v, spec, seed), proj)
    np.testing.assert_allclose(np.linalg.norm(theta), np.linalg.norm(v), rtol=1e-12)


def test_k_equals_p_is_signed_permutation():
    spec = LoraSpec(1, (0,), ((4, 3),))
    proj = build_projection(9, spec, spec.n_params)
    assert sorted(proj.buckets) == list(range(spec.n_params))
    assert set(np.abs(proj.scale)) == {1.0}


@given(st.floats(-3, 3).filter(lambda a: abs(a) > 1e-3))
@settings(max_examples=30, deadline=None)
def test_rank_one_update_is_quadratic_in_v(a):
    spec = LoraSpec(1, (0,), ((5, 4),))
    proj = build_projection(1, spec, 6)
    v = np.linspace(-1, 1, 6)
    d1 = expand_vector(OneVector(v, spec, 1), proj)[0]
    d2 = expand_vector(OneVector(a * v, spec, 1), proj)[0]
    np.testing.assert_allclose(d2, a * a * d1, rtol=1e-10, atol=1e-14)


def test_vector_gradient_matches_finite_differences(small_net):
    spec = spec_for(small_net, rank=2)
    proj = build_projection(3, spec, 40)
    rng = np.random.default_rng(0)
    ov = OneVector(0.3 * rng.standard_normal(40), spec, 3)
    x = rng.uniform(size=8)
    t = sample_times(rng, 8)
    eps = rng.standard_normal((8, 8))
    _, g = loss_and_vector_grad(small_net, ov, proj, x, t, eps)
    loss = lambda: loss_fm_and_grad(small_net, x, t, eps, expand_vector(ov, proj))[0]
    assert check_gradient(loss, [ov.v], [g], n_probe=40).max_rel_err < 1e-3


def test_mismatched_vector_and_projection(small_net):
    spec = spec_for(small_net)
    proj = build_projection(0, spec, 16)
    with pytest.raises(IntegrityError):
        expand_vector(OneVector(np.zeros(16), spec, 1), proj)
    with pytest.raises(IntegrityError):
        expand_vector(OneVector(np.zeros(15), spec, 0), proj)


def test_config_errors(small_net):
    with pytest.raises(ConfigError):
        spec_for(small_net, rank=0)
    with pytest.raises(ConfigError):
        build_projection(0, spec_for(small_net), 0)


def test_layer_subset(small_net):
    spec = spec_for(small_net, layers=[2])
    d = expand_vector(OneVector(np.ones(8), spec, 0), build_projection(0, spec, 8))
    assert list(d) == [2] and d[2].shape == small_net.weights[2].shape


def test_stage1_lowers_loss_and_is_deterministic(trained_net):
    from tests.conftest import heldout

    x = heldout(0)
    spec = spec_for(trained_net)
    cfg = FitConfig(steps=60)
    c1, c2 = [], []
    a = fit_vector_stage1(trained_net, x, spec, 256, cfg, curve=c1)
    b = fit_vector_stage1(trained_net, x, spec, 256, cfg, curve=c2)
    assert np.array_equal(a.v, b.v)
    assert np.mean(c1[-15:]) < np.mean(c1[:15])


def test_stage1_psnr_increases_with_steps(trained_net):
    """Constant learning rate, so each shorter run is a prefix of the longer ones."""
    from tests.conftest import heldout
    from vovc.dynamics import TimeGrid, ode_decode
    from vovc.evaluation import psnr
    from vovc.scaling import initial_state

    spec = spec_for(trained_net)
    means = []
    for steps in (50, 100, 200, 400):
        vals = []
        for i in range(3):
            x = heldout(i)
            ov = fit_vector_stage1(trained_net, x, spec, 1024, FitConfig(steps=steps, cosine=False))
            vf = trained_net.field(expand_vector(ov, build_projection(0, spec, 1024)))
            vals.append(psnr(x, ode_decode(initial_state(0, x.size), vf, TimeGrid.uniform(50))))
        means.append(np.mean(vals))
    assert np.all(np.diff(means) > 0), means
