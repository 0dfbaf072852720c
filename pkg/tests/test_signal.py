import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

import oracles
from persfall.signal import (FEATURE_LEN, STANDARD_GRAVITY, WINDOW_LEN, AccelSample, AccelTrace,
                             SignalError, TiltConfig, convert_units, extract_window, find_peak,
                             flatten, smv, tilt_angle, tilt_from_means, trace_features,
                             window_bounds)

finite = st.floats(-50, 50, allow_nan=False)


def _trace(n=300, fill=(0.0, 9.8, 0.0)):
    return AccelTrace(np.tile(np.array(fill, dtype=float), (n, 1)))


# -- smv
@pytest.mark.parametrize("v, expected", [((0, 0, 9.81), 9.81), ((0, 0, 0), 0.0), ((3, 4, 12), 13.0)])
def test_smv_examples(v, expected):
    assert smv(v) == pytest.approx(expected, abs=1e-12)


def _random_rotation(a, b, c):
    ca, sa, cb, sb, cc, sc = map(float, (math.cos(a), math.sin(a), math.cos(b), math.sin(b),
                                         math.cos(c), math.sin(c)))
    rz = np.array([[ca, -sa, 0], [sa, ca, 0], [0, 0, 1]])
    ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
    rx = np.array([[1, 0, 0], [0, cc, -sc], [0, sc, cc]])
    return rz @ ry @ rx


angles = st.floats(-math.pi, math.pi, allow_nan=False)


@given(st.tuples(finite, finite, finite), angles, angles, angles)
def test_smv_rotation_invariant(v, a, b, c):
    r = _random_rotation(a, b, c)
    assert smv(r @ np.array(v)) == pytest.approx(smv(v), abs=1e-9)


def test_sample_validation():
    with pytest.raises(SignalError):
        AccelSample(float("nan"), 0, 0, 0)
    with pytest.raises(SignalError):
        AccelSample(-1.0, 0, 0, 0)


# -- find_peak
def test_peak_constant_trace_is_earliest():
    assert find_peak(_trace()) == 0


def test_peak_single_spike():
    xyz = np.tile([0.0, 9.8, 0.0], (300, 1))
    xyz[150] = [0.0, 30.0, 0.0]
    assert find_peak(AccelTrace(xyz)) == 150


def test_peak_matches_oracle_on_synthetic_falls(small_ds):
    for rec in small_ds.records:
        if rec.is_fall:
            assert find_peak(rec.trace) == oracles.smv_argmax(rec.trace.xyz.tolist())


def test_peak_matches_oracle_1000_traces():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        n = int(rng.integers(101, 400))
        xyz = rng.normal(0, 5, size=(n, 3))
        if rng.random() < 0.2:  # plant exact ties
            xyz[int(rng.integers(n))] = xyz[int(rng.integers(n))]
        assert find_peak(AccelTrace(xyz)) == oracles.smv_argmax(xyz.tolist())


# -- window
@pytest.mark.parametrize("peak, lo, hi", [(150, 100, 200), (10, 0, 100), (295, 199, 299)])
def test_window_bounds(peak, lo, hi):
    assert window_bounds(300, peak) == (lo, hi + 1)


def test_window_rejects_short_trace():
    with pytest.raises(SignalError, match="trace too short"):
        window_bounds(100, 50)


@settings(max_examples=200)
@given(st.integers(101, 500), st.data())
def test_window_shape_and_contains_peak(n, data):
    peak = data.draw(st.integers(0, n - 1))
    xyz = np.arange(n * 3, dtype=float).reshape(n, 3)
    w = extract_window(AccelTrace(xyz), peak)
    assert w.xyz.shape == (WINDOW_LEN, 3)
    assert w.start <= peak < w.start + WINDOW_LEN
    vec = flatten(w)
    # flatten keeps every sample value untouched
    np.testing.assert_array_equal(vec[:WINDOW_LEN], xyz[w.start:w.start + WINDOW_LEN, 0])
    np.testing.assert_array_equal(vec[WINDOW_LEN:2 * WINDOW_LEN], xyz[w.start:w.start + WINDOW_LEN, 1])
    np.testing.assert_array_equal(vec[2 * WINDOW_LEN:], xyz[w.start:w.start + WINDOW_LEN, 2])
    assert vec[101] == w.xyz[0, 1]


def test_flatten_examples():
    zeros = np.zeros((300, 3))
    assert np.array_equal(trace_features(AccelTrace(zeros)), np.zeros(FEATURE_LEN))
    xyz = np.zeros((300, 3))
    w = extract_window(AccelTrace(xyz), 150)
    xyz[w.start, 0] = 1.0
    vec = flatten(extract_window(AccelTrace(xyz), 150))
    assert vec[0] == 1.0 and vec[1:].sum() == 0.0


# -- tilt
@pytest.mark.parametrize("mx, my, deg", [(0.0, 9.81, 0.0), (9.81, 0.0, 90.0), (5.0, 5.0, 45.0)])
def test_tilt_examples(mx, my, deg):
    assert tilt_from_means(mx, my) == pytest.approx(deg, abs=1e-9)


def test_tilt_flat_pose_counts_as_lying():
    assert tilt_from_means(0.1, 0.2) == 90.0


@given(st.floats(0.6, 20), st.floats(0.6, 20), st.floats(0.05, 50))
def test_tilt_scale_invariant(mx, my, c):
    assume(max(c * mx, c * my) >= TiltConfig().epsilon)
    assert tilt_from_means(c * mx, c * my) == pytest.approx(tilt_from_means(mx, my), abs=1e-9)


def test_tilt_angle_uses_post_peak_interval():
    xyz = np.tile([0.0, 9.81, 0.0], (300, 1))
    xyz[50] = [0.0, 30.0, 0.0]
    start, stop = TiltConfig().interval(50, 50.0)
    assert (start, stop) == (150, 200)
    xyz[start:stop] = [9.81, 0.0, 0.0]
    assert tilt_angle(AccelTrace(xyz), 50) == pytest.approx(90.0)


def test_tilt_angle_needs_post_peak_data():
    with pytest.raises(SignalError, match="insufficient post-peak data"):
        tilt_angle(_trace(), 200)


# -- units
def test_units_g_conversion():
    t = AccelTrace(np.array([[0.0, 1.0, 0.0]] * 101), units="g")
    out = convert_units(t)
    assert out.units == "m/s^2"
    assert out.xyz[0, 1] == pytest.approx(STANDARD_GRAVITY)


def test_units_identity_for_ms2():
    t = _trace()
    assert convert_units(t) == t


def test_units_one_and_a_half_g_near_prefilter_threshold():
    t = AccelTrace(np.array([[0.0, 1.5, 0.0]] * 101), units="g")
    v = convert_units(t).xyz[0, 1]
    assert v == pytest.approx(14.70998, abs=1e-5)
    assert abs(v - 14.7) < 0.01


def test_trace_rejects_bad_input():
    with pytest.raises(SignalError, match="empty trace"):
        AccelTrace(np.zeros((0, 3)))
    with pytest.raises(SignalError):
        AccelTrace.from_axes([1.0, 2.0], [1.0], [1.0, 2.0])
