import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vovc import _rangecoder_py, ratecode
from vovc.ratecode import (
    EntropyModel,
    ModelError,
    RangeDecodeError,
    em_pmf,
    fit_entropy_model,
    freq_table,
    quantize,
    range_decode,
    range_encode,
    rate_bits,
    round_half_away,
)

try:
    from vovc import _rangecoder
except ImportError:
    _rangecoder = None

psis = arrays(np.float64, 9, elements=st.floats(-3, 3))
small_q = st.integers(1, 64)
symbols = st.lists(st.integers(-(2**31), 2**31 - 1) | st.integers(-80, 80), max_size=300)


def model(psi, q_max=64):
    return EntropyModel(psi, q_max)


@given(psis, small_q)
@settings(max_examples=100, deadline=None)
def test_pmf_table_sums_to_one(psi, q):
    p = model(psi, q).pmf_table()
    assert p.size == 2 * q + 2
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) < 1e-6


@given(psis, small_q)
@settings(max_examples=100, deadline=None)
def test_freq_table_is_valid(psi, q):
    cum = freq_table(model(psi, q))
    assert cum[0] == 0 and cum[-1] == 2**16
    assert np.all(np.diff(cum.astype(np.int64)) >= 1)


@given(psis, symbols, small_q)
@settings(max_examples=200, deadline=None)
def test_range_coder_roundtrip(psi, syms, q):
    em = model(psi, q)
    data = range_encode(syms, em)
    assert range_decode(data, len(syms), em).tolist() == syms


@pytest.mark.skipif(_rangecoder is None, reason="compiled coder not built")
@given(psis, symbols, small_q)
@settings(max_examples=100, deadline=None)
def test_backends_agree_bytewise(psi, syms, q):
    cum = freq_table(model(psi, q))
    s = np.asarray(syms, dtype=np.int64)
    a = _rangecoder_py.encode(s, cum, q)
    b = _rangecoder.encode(s, cum, q)
    assert a == b
    if syms:
        buf = np.frombuffer(a, dtype=np.uint8)
        assert list(_rangecoder.decode(buf, len(syms), cum, q)) == syms


def test_selected_backend_is_reported():
    assert ratecode.BACKEND in ("compiled", "python")


def test_coded_size_tracks_cross_entropy():
    em = EntropyModel.init(scale=3.0)
    q = quantize(np.random.default_rng(1).laplace(0, 3, 20000), 1.0)
    H = rate_bits(em, q)
    coded = 8 * len(range_encode(q, em))
    assert H <= coded <= 1.02 * H + 64


def test_escape_costs_thirty_two_raw_bits():
    em = EntropyModel.init()
    base = rate_bits(em, [0])
    assert rate_bits(em, [1000]) == pytest.approx(-np.log2(em.pmf_table()[-1]) + 32)
    assert base < rate_bits(em, [1000])


def test_decoder_rejects_truncation_and_trailing_bytes():
    em = EntropyModel.init()
    q = np.arange(-20, 20)
    data = range_encode(q, em)
    with pytest.raises(RangeDecodeError):
        range_decode(data[:-1], q.size, em)
    with pytest.raises(RangeDecodeError):
        range_decode(data + b"\x00", q.size, em)
    with pytest.raises(RangeDecodeError):
        range_decode(b"\x01" + data[1:], q.size, em)
    with pytest.raises(RangeDecodeError):
        range_decode(b"x", 0, em)


def test_empty_stream():
    em = EntropyModel.init()
    assert range_encode([], em) == b""
    assert range_decode(b"", 0, em).size == 0


def test_symbol_outside_escape_range():
    with pytest.raises(ModelError):
        range_encode([2**31], EntropyModel.init())


def _mp_log2_likelihood(psi, y):
    """High-precision reference for ``log2 p(y)``."""
    sp = lambda v: mp.log(1 + mp.exp(v))
    sig = lambda v: 1 / (1 + mp.exp(-v))

    def z(v):
        out = psi[8]
        for j in range(2):
            u = sp(psi[j]) * v + psi[2 + j]
            out += sp(psi[6 + j]) * (u + mp.tanh(psi[4 + j]) * mp.tanh(u))
        return out

    return mp.log(sig(z(y + mp.mpf(0.5))) - sig(z(y - mp.mpf(0.5)))) / mp.log(2)


@given(arrays(np.float64, 3, elements=st.floats(-40, 40)), arrays(np.float64, 9, elements=st.floats(-1, 1)))
@settings(max_examples=15, deadline=None)
def test_likelihood_gradients_against_high_precision(y, psi):
    em = EntropyModel(psi)
    lp, dy, dpsi = em.log2_likelihood_and_grad(y)
    with mp.workdps(50):
        mpsi = [mp.mpf(float(v)) for v in psi]
        for i, yi in enumerate(y):
            f = lambda v: _mp_log2_likelihood(mpsi, v)
            assert float(f(mp.mpf(float(yi)))) == pytest.approx(lp[i], rel=1e-9, abs=1e-9)
            assert float(mp.diff(f, mp.mpf(float(yi)))) == pytest.approx(dy[i], rel=1e-6, abs=1e-9)
            for j in range(9):
                def g(v, j=j):
                    q = list(mpsi)
                    q[j] = v
                    return _mp_log2_likelihood(q, mp.mpf(float(yi)))
                assert float(mp.diff(g, mpsi[j])) == pytest.approx(dpsi[i, j], rel=1e-6, abs=1e-9)


def test_likelihood_agrees_with_pmf_table():
    em = EntropyModel(np.random.default_rng(2).uniform(-1, 1, 9), q_max=10)
    ys = np.arange(-10, 11)
    np.testing.assert_allclose(em.likelihood(ys), em.pmf_table()[:-1], rtol=1e-12)
    np.testing.assert_allclose(em_pmf(em, ys), em.pmf_table()[:-1], rtol=1e-12)


def test_entropy_fit_reduces_rate():
    q = quantize(np.random.default_rng(3).normal(0, 1.5, 4000), 1.0)
    em0 = EntropyModel.init(scale=10.0)
    em1 = fit_entropy_model(q, em0, steps=200)
    assert rate_bits(em1, q) < rate_bits(em0, q)


@given(arrays(np.float64, 30, elements=st.floats(-1e6, 1e6)))
@settings(max_examples=100, deadline=None)
def test_round_half_away_is_odd_and_close(y):
    r = round_half_away(y)
    assert np.all(np.abs(r - y) <= 0.5)
    np.testing.assert_array_equal(round_half_away(-y), -r)


def test_round_half_away_ties():
    assert round_half_away([0.5, 1.5, -0.5, -2.5]).tolist() == [1, 2, -1, -3]


def test_model_parameter_errors():
    with pytest.raises(ModelError):
        EntropyModel(np.zeros(8))
    with pytest.raises(ModelError):
        EntropyModel(np.full(9, np.nan))
