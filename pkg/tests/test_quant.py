import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mpqdm.quant import (
    QuantError,
    QuantParams,
    compute_quant_params,
    dequantize,
    fake_quant,
    per_channel_quantize,
    quant_mse,
    quantize,
    round_half_away,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def test_params_three_points_two_bits():
    p = compute_quant_params([0.0, 0.5, 1.0], 2)
    assert p.scale == pytest.approx(1 / 3, rel=1e-15)
    assert (p.zero_point, p.lower, p.upper) == (0, 0.0, 1.0)


def test_params_symmetric_eight_bits():
    p = compute_quant_params([-1.0, 1.0], 8)
    assert p.scale == pytest.approx(2 / 255, rel=1e-15)
    # -l/s = 127.5 rounds away from zero
    assert p.zero_point == 128


def test_params_constant_input():
    p = compute_quant_params([0.0, 0.0, 0.0], 3)
    assert p.scale == pytest.approx(1e-6 / 7, rel=1e-12)
    assert p.zero_point == 0
    # nonzero constants stay representable because the range contains zero
    q = compute_quant_params([2.5, 2.5, 2.5], 3)
    assert fake_quant([2.5], q)[0] == pytest.approx(2.5, rel=1e-12)


def test_params_percentile_mode():
    x = np.concatenate([np.linspace(-1, 1, 999), [50.0]])
    p = compute_quant_params(x, 4, 99.0)
    assert p.upper < 50.0
    assert p.upper == pytest.approx(np.percentile(x, 99.0))


@pytest.mark.parametrize("bad, msg", [([], "empty input"), ([1.0, np.nan], "non-finite input"),
                                      ([np.inf], "non-finite input")])
def test_params_input_errors(bad, msg):
    with pytest.raises(QuantError, match=msg):
        compute_quant_params(bad, 4)


@pytest.mark.parametrize("bits", [0, 17])
def test_params_bits_range(bits):
    with pytest.raises(QuantError):
        compute_quant_params([0.0, 1.0], bits)


def test_quantize_examples():
    p = compute_quant_params([0.0, 0.5, 1.0], 2)
    assert quantize([0.0, 0.5, 1.0], p).codes.tolist() == [0, 2, 3]
    assert quantize([-100.0], p).codes.tolist() == [0]
    grid = p.lower + np.arange(4) * p.scale
    assert quantize(grid, p).codes.tolist() == [0, 1, 2, 3]


def test_dequantize_examples():
    p = QuantParams(2, 1 / 3, 0, 0.0, 1.0)
    q = quantize([0.0, 0.5, 1.0], p)
    np.testing.assert_allclose(dequantize(q), [0.0, 2 / 3, 1.0], rtol=0, atol=1e-15)
    p2 = compute_quant_params([-1.0, 1.0], 4)
    q2 = quantize(np.zeros(5), p2)
    assert np.all(q2.codes == p2.zero_point)
    assert np.all(dequantize(q2) == 0.0)


def test_fake_quant_examples():
    p = QuantParams(2, 1 / 3, 0, 0.0, 1.0)
    assert fake_quant([0.4], p)[0] == pytest.approx(1 / 3, abs=1e-15)
    assert fake_quant([10.0], p)[0] == pytest.approx(1.0, abs=1e-15)
    grid = np.arange(4) / 3
    np.testing.assert_allclose(fake_quant(grid, p), grid, atol=1e-15)


def test_quant_mse_examples():
    p = QuantParams(2, 1 / 3, 0, 0.0, 1.0)
    assert quant_mse(np.arange(4) * p.scale, p) == pytest.approx(0.0, abs=1e-30)
    # 0.5 / s = 1.5 rounds to 2 -> 2/3
    assert quant_mse([0.5], p) == pytest.approx((0.5 - 2 / 3) ** 2, rel=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_quant_mse_monotone_in_bits(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=500)
    lo, hi = x.min(), x.max()
    errs = [quant_mse(x, QuantParams.from_range(lo, hi, b)) for b in range(2, 9)]
    # doubling levels halves the step; MSE ~ s^2/12
    assert all(b <= a for a, b in zip(errs, errs[1:]))


def test_per_channel_identical_channels():
    row = np.random.default_rng(1).normal(size=10)
    q = per_channel_quantize(np.stack([row, row]), [3, 3])
    assert np.array_equal(q.codes[0], q.codes[1])
    assert q.params[0] == q.params[1]


def test_per_channel_more_bits_less_error():
    row = np.random.default_rng(2).normal(size=64)
    W = np.stack([row, row])
    q = per_channel_quantize(W, [2, 4])
    err = np.abs(dequantize(q) - W).max(axis=1)
    assert err[0] >= err[1]


def test_per_channel_single_channel_matches_per_tensor():
    row = np.random.default_rng(3).normal(size=(1, 20))
    qc = per_channel_quantize(row, [5])
    qt = quantize(row, compute_quant_params(row, 5))
    assert np.array_equal(qc.codes, qt.codes)
    assert qc.params[0] == qt.params
    np.testing.assert_array_equal(dequantize(qc), dequantize(qt))


def test_per_channel_other_axis():
    W = np.random.default_rng(4).normal(size=(6, 3))
    qa = per_channel_quantize(W, [2, 3, 4], channel_axis=1)
    qb = per_channel_quantize(W.T, [2, 3, 4], channel_axis=0)
    assert np.array_equal(qa.codes, qb.codes.T)
    np.testing.assert_array_equal(dequantize(qa), dequantize(qb).T)


def test_per_channel_length_mismatch():
    with pytest.raises(QuantError):
        per_channel_quantize(np.zeros((3, 4)), [2, 2])


def test_round_half_away_scalar_cases():
    np.testing.assert_array_equal(round_half_away(np.array([2.5, -2.5, 1.4999])), [3.0, -3.0, 1.0])


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 40), elements=finite), st.integers(1, 8))
def test_codes_in_range_and_roundtrip_bound(x, bits):
    p = compute_quant_params(x, bits)
    q = quantize(x, p)
    assert q.codes.min() >= 0 and q.codes.max() <= p.qmax
    assert 0 <= p.zero_point <= p.qmax
    xf = fake_quant(x, p)
    inside = (x >= p.lower) & (x <= p.upper)
    assert np.all(np.abs(xf - x)[inside] <= p.scale / 2 + 1e-9)
    assert np.array_equal(fake_quant(xf, p), xf)
    assert p.scale * p.qmax == pytest.approx(p.upper - p.lower, rel=1e-12)
