import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from codenet.quant import (PER_CHANNEL, PER_LAYER, QuantParams, RequantParams,
                           calibrate, clamp_threshold, dequantize, derive_requant,
                           quantize, requantize)
from codenet.tensor import AccumTensor, FloatTensor, Shape4

from oracles import quantize_scalar, requant_float64


def _ft(values, shape=None):
    arr = np.asarray(values, dtype=np.float32)
    if shape is None:
        shape = (1, 1, 1, arr.size)
    return FloatTensor(Shape4(*shape), arr.reshape(shape))


def _qp(bits, t, granularity=PER_LAYER):
    return QuantParams(bits, granularity, np.atleast_1d(np.asarray(t, dtype=np.float64)))


class TestClamp:
    def test_in_range_identity(self):
        out = clamp_threshold(_ft([0.5]), _qp(8, 1.0))
        assert out.data[0, 0, 0, 0] == 0.5

    def test_upper_clamp(self):
        out = clamp_threshold(_ft([200.0]), _qp(8, 127.0))
        assert out.data[0, 0, 0, 0] == 127.0

    def test_both_boundaries_and_zero(self):
        out = clamp_threshold(_ft([-3.2, 0.0, 9.9]), _qp(8, 2.0))
        assert np.allclose(out.data.ravel(), [-2.0, 0.0, 2.0])

    def test_nonpositive_threshold_rejected(self):
        with pytest.raises(ValueError):
            _qp(8, 0.0)


class TestQuantize:
    def test_zero_maps_to_zero(self):
        q = quantize(_ft([0.0]), _qp(8, 5.0))
        assert q.at(0, 0, 0, 0) == 0

    def test_unit_step(self):
        # t = 127 at 8 bits gives delta exactly 1
        q = quantize(_ft([3.4]), _qp(8, 127.0))
        assert q.at(0, 0, 0, 0) == 3

    def test_matches_scalar_oracle_4bit(self):
        rng = np.random.default_rng(7)
        xs = rng.uniform(-7, 7, size=256).astype(np.float32)
        q = quantize(_ft(xs), _qp(4, 7.0))
        expected = [quantize_scalar(float(np.float32(x)), 7.0, 4) for x in xs]
        assert q.data.ravel().tolist() == expected

    def test_dequantize_unit_step(self):
        q = quantize(_ft([3.0]), _qp(8, 127.0))
        assert dequantize(q).data[0, 0, 0, 0] == 3.0

    def test_round_trip_error_bound(self):
        rng = np.random.default_rng(3)
        for bits, t in ((4, 2.5), (8, 1.0)):
            xs = rng.uniform(-t, t, size=2048).astype(np.float32)
            q = quantize(_ft(xs), _qp(bits, t))
            back = dequantize(q).data.ravel()
            delta = t / (2 ** (bits - 1) - 1)
            assert np.max(np.abs(back - xs.astype(np.float64))) <= delta / 2 * (1 + 1e-9)


@given(st.floats(-10, 10), st.floats(-10, 10))
def test_quantize_monotone(a, b):
    qp = _qp(8, 4.0)
    lo, hi = sorted((a, b))
    qa = quantize(_ft([lo]), qp).at(0, 0, 0, 0)
    qb = quantize(_ft([hi]), qp).at(0, 0, 0, 0)
    assert qa <= qb


@given(st.floats(-4, 4))
def test_quantize_odd_symmetry(x):
    qp = _qp(8, 4.0)
    qpos = quantize(_ft([x]), qp).at(0, 0, 0, 0)
    qneg = quantize(_ft([-x]), qp).at(0, 0, 0, 0)
    assert qneg == -qpos


class TestCalibrate:
    def test_per_layer_max_abs(self):
        qp = calibrate([_ft([-3.0, 2.0])], bits=8)
        assert qp.t[0] == 3.0

    def test_per_channel_max_abs(self):
        qp = calibrate([_ft([1.0, -5.0], shape=(1, 1, 1, 2))], bits=8, granularity=PER_CHANNEL)
        assert qp.t.tolist() == [1.0, 5.0]

    def test_all_zero_fallback(self):
        qp = calibrate([_ft([0.0, 0.0])], bits=4)
        assert qp.t[0] == 1.0
        assert qp.delta[0] == 1.0 / 7.0

    def test_needs_samples(self):
        with pytest.raises(ValueError):
            calibrate([], bits=8)


class TestDeriveRequant:
    def test_power_of_two_factor(self):
        rp = derive_requant(1.0, [0.5], 1.0)
        assert rp.multiplier[0] == 2**30
        assert rp.shift[0] == 31

    def test_one_third_precision(self):
        rp = derive_requant(1.0, [1.0 / 3.0], 1.0)
        approx = rp.multiplier[0] * 2.0 ** (-rp.shift[0])
        assert abs(approx - 1.0 / 3.0) < 2.0**-24 / 3.0

    def test_zero_bias(self):
        rp = derive_requant(1.0, [0.25], 1.0, bias_fp=[0.0])
        assert rp.bias[0] == 0

    def test_factor_above_one(self):
        rp = derive_requant(4.0, [1.0], 1.0)
        assert abs(rp.multiplier[0] * 2.0 ** (-rp.shift[0]) - 4.0) < 1e-6

    def test_underflow_rejected(self):
        with pytest.raises(ValueError):
            derive_requant(1.0, [2.0**-40], 1.0)

    def test_nonpositive_delta_rejected(self):
        with pytest.raises(ValueError):
            derive_requant(0.0, [1.0], 1.0)


class TestRequantize:
    def _acc(self, values, oc=1):
        arr = np.asarray(values, dtype=np.int32)
        return AccumTensor(Shape4(1, 1, 1 if arr.ndim == 0 else arr.size // oc, oc),
                           arr.reshape(1, 1, -1, oc))

    def test_zero(self):
        rp = derive_requant(1.0, [0.5], 1.0)
        out = requantize(self._acc([0]), rp)
        assert out.at(0, 0, 0, 0) == 0

    def test_exact_halving_saturation_boundary(self):
        rp = derive_requant(1.0, [0.5], 1.0)
        out = requantize(self._acc([254]), rp)
        assert out.at(0, 0, 0, 0) == 127

    def test_saturates(self):
        rp = derive_requant(1.0, [0.5], 1.0)
        out = requantize(self._acc([100000, -100000]), rp)
        assert out.data.ravel().tolist() == [127, -127]

    def test_matches_float64_oracle(self):
        rng = np.random.default_rng(11)
        for trial in range(50):
            oc = int(rng.integers(1, 9))
            acc = rng.integers(-(1 << 20), (1 << 20) + 1, size=(1, 4, 4, oc)).astype(np.int32)
            mult = rng.integers(1 << 30, 1 << 31, size=oc)
            shift = rng.integers(31, 45, size=oc)
            bias = rng.integers(-1000, 1000, size=oc)
            relu = bool(rng.integers(0, 2))
            rp = RequantParams(mult, shift, bias, out_delta=1.0, relu=relu)
            got = requantize(AccumTensor(Shape4(1, 4, 4, oc), acc), rp)
            want = requant_float64(acc, mult, shift, bias, relu)
            assert np.array_equal(got.data, want)

    def test_truncate_mode_wraps(self):
        rp = RequantParams([1 << 30], [30], [0], out_delta=1.0)
        acc = self._acc([130])  # scaled value 130 wraps to -126 in 8 bits
        raw = requantize(acc, rp, truncate=True)
        assert isinstance(raw, np.ndarray)
        assert raw.ravel()[0] == -126

    def test_determinism(self):
        rng = np.random.default_rng(5)
        acc = rng.integers(-(1 << 20), 1 << 20, size=(1, 8, 8, 4)).astype(np.int32)
        rp = derive_requant(0.01, [0.02, 0.3, 0.004, 0.11], 0.05, bias_fp=[1.0, -2.0, 0.0, 3.5])
        a = requantize(AccumTensor(Shape4(1, 8, 8, 4), acc), rp)
        b = requantize(AccumTensor(Shape4(1, 8, 8, 4), acc), rp)
        assert np.array_equal(a.data, b.data)


@settings(max_examples=200)
@given(st.integers(-(1 << 20), 1 << 20), st.integers(0, 40))
def test_requantize_rounding_identity(acc, shift):
    # the integer rounding shift equals round-half-up in the shifted domain
    m = 1 << 30
    rp = RequantParams([m], [shift], [0], out_delta=1.0)
    got = requantize(AccumTensor(Shape4(1, 1, 1, 1), np.array([[[[acc]]]], dtype=np.int32)), rp)
    want = requant_float64(np.array([[[[acc]]]], dtype=np.int32),
                           np.array([m]), np.array([shift]), np.array([0]), False)
    assert got.at(0, 0, 0, 0) == int(want.ravel()[0])
