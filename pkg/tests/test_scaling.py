import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vovc.dynamics import NumericError, TimeGrid, analytic_field
from vovc.scaling import (
    IntegrityError,
    ScalingTrace,
    categorical,
    decode_scaled,
    encode_scaled,
    importance_weight,
    index_bits,
    log_importance_weights,
    normalized_weights,
    pack_indices,
    plain_sde_decode,
    selection_step,
    unpack_indices,
)


@given(st.integers(1, 5000), st.data())
@settings(max_examples=200, deadline=None)
def test_index_packing_roundtrip(M, data):
    n = data.draw(st.integers(1, 40))
    idx = tuple(data.draw(st.lists(st.integers(0, M - 1), min_size=n, max_size=n)))
    raw = pack_indices(idx, M)
    assert len(raw) == -(-n * index_bits(M) // 8)
    assert unpack_indices(raw, n, M) == idx


def test_index_bits():
    assert [index_bits(M) for M in (1, 2, 3, 4, 1024, 1025)] == [0, 1, 2, 2, 10, 11]
    assert ScalingTrace(100, 1024, (0,) * 100, 0).side_bits == 1000


def test_trace_integrity():
    with pytest.raises(IntegrityError):
        ScalingTrace(3, 4, (0, 1), 0)
    with pytest.raises(IntegrityError):
        ScalingTrace(2, 4, (0, 4), 0)
    with pytest.raises(IntegrityError):
        unpack_indices(b"\x00", 9, 4)


@given(st.lists(st.floats(0.01, 10), min_size=1, max_size=20), st.floats(0, 1, exclude_max=True))
@settings(max_examples=200, deadline=None)
def test_categorical_inverse_cdf(w, u):
    w = np.array(w)
    i = categorical(w, u)
    cdf = np.cumsum(w) / w.sum()
    assert 0 <= i < w.size
    assert u < cdf[i] + 1e-12 and (i == 0 or u >= cdf[i - 1] - 1e-12)


def test_weights_cancel_for_identical_kernels():
    c = np.random.default_rng(0).normal(size=(5, 3))
    mu = np.zeros(3)
    np.testing.assert_allclose(normalized_weights(log_importance_weights(c, mu, mu, 1.0)), 0.2)


def test_non_finite_weights_raise():
    with pytest.raises(NumericError):
        normalized_weights([0.0, np.nan])


def test_importance_weight_subset_normalization():
    rng = np.random.default_rng(1)
    x, x_t = rng.uniform(size=4), rng.normal(size=4)
    vf = lambda y, t: np.zeros_like(y)
    cands = rng.normal(size=(6, 4))
    full = importance_weight(cands, x_t, 0.5, 0.05, x, vf)
    part = importance_weight(cands[:2], x_t, 0.5, 0.05, x, vf, others=cands[2:])
    np.testing.assert_allclose(part, full[:2])
    assert full.sum() == pytest.approx(1.0)


@pytest.mark.parametrize("M", [1, 3, 16])
def test_analytic_field_scaled_decode_is_exact(M):
    x = np.random.default_rng(2).uniform(size=10)
    grid = TimeGrid.uniform(30)
    trace, x_hat = encode_scaled(analytic_field(x), x, grid, M, seed=5)
    np.testing.assert_allclose(x_hat, x, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(decode_scaled(analytic_field(x), trace, grid, 10), x, rtol=1e-9, atol=1e-12)


def test_replay_is_bit_exact_for_mismatched_field():
    rng = np.random.default_rng(3)
    x = rng.uniform(size=8)
    vf = lambda y, t: 0.5 * y
    grid = TimeGrid.uniform(20)
    trace, x_hat = encode_scaled(vf, x, grid, 8, seed=11)
    assert np.array_equal(decode_scaled(vf, trace, grid, 8), x_hat)
    with pytest.raises(IntegrityError):
        decode_scaled(vf, trace, TimeGrid.uniform(21), 8)


def test_m_one_is_plain_sde():
    x = np.linspace(0, 1, 6)
    vf = lambda y, t: y - 0.3
    grid = TimeGrid.uniform(15)
    trace, x_hat = encode_scaled(vf, x, grid, 1, seed=4)
    assert trace.indices == (0,) * 15
    assert np.array_equal(plain_sde_decode(vf, grid, 4, 6), x_hat)


def test_selection_m_one_follows_proposal():
    picks = selection_step(0.5, 0.5, 0.1, 1.0, M=1, trials=2000, seed=0)
    # proposal mean for v = 0: x_t - x_t / (1 - t) dt = 0.4
    assert abs(picks.mean() - 0.4) < 4 * picks.std() / np.sqrt(picks.size)
