import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import companion, modal_step_response, rk4_piecewise
from steamflow.plant import (ActuatorParams, ParameterError, PlantInputError, RepresentationError,
                             StateSpace, TransferFunction, build_transfer_function, discretize, make_plant,
                             plant_step, tf_to_state_space)

NOMINAL_DEN = [1, 9, 25, 31, 30]


def test_nominal_expansion_is_exact():
    tf = build_transfer_function(ActuatorParams())
    assert tf.numerator == (0.75,)
    assert tf.denominator == tuple(float(c) for c in NOMINAL_DEN)


def test_zero_gain_relay():
    tf = build_transfer_function(ActuatorParams(relay_km=0.0))
    assert tf.numerator == (0.0,)
    assert tf.denominator == tuple(float(c) for c in NOMINAL_DEN)


def test_expansion_against_hand_product():
    # (2s+4)(s+1)(s^2+2s+1) = 2s^4 + 10s^3 + 18s^2 + 14s + 4, times num p*km = 1
    p = ActuatorParams(inductance_L=2, resistance_R=4, mass_m=1, damper_D=2, spring_k=1, relay_km=1, sensor_p=1)
    tf = build_transfer_function(p)
    expected = np.polymul(np.polymul([2, 4], [1, 1]), [1, 2, 1])
    assert tf.denominator == tuple(float(c) for c in expected)
    assert tf.numerator == (1.0,)


@pytest.mark.parametrize("name,value", [("inductance_L", 0.0), ("mass_m", -1.0), ("sensor_p", 0.0),
                                        ("relay_km", -0.5), ("spring_k", math.nan), ("damper_D", math.inf)])
def test_invalid_parameter_names_field(name, value):
    with pytest.raises(ParameterError, match=name):
        ActuatorParams(**{name: value})


def test_build_rejects_non_params():
    with pytest.raises(ParameterError):
        build_transfer_function({"inductance_L": 1})


def test_first_order_realization():
    ss = tf_to_state_space(TransferFunction((1.0,), (1.0, 1.0)))
    assert ss.A.tolist() == [[-1.0]]
    assert ss.B.tolist() == [[1.0]]
    assert ss.C.tolist() == [[1.0]]
    assert ss.D_term == 0.0


def test_companion_form_of_nominal_plant():
    ss = tf_to_state_space(build_transfer_function(ActuatorParams()))
    assert ss.A[-1].tolist() == [-30.0, -31.0, -25.0, -9.0]
    assert ss.C.tolist() == [[0.75, 0.0, 0.0, 0.0]]
    np.testing.assert_array_equal(ss.A[:-1, 1:], np.eye(3))
    assert ss.dc_gain() == pytest.approx(0.025, abs=1e-15)


@pytest.mark.parametrize("w", [0.1, 1.0, 10.0])
def test_frequency_response_matches_transfer_function(w):
    tf = build_transfer_function(ActuatorParams())
    ss = tf_to_state_space(tf)
    s = 1j * w
    direct = 0.75 / np.polyval(NOMINAL_DEN, s)
    assert ss.frequency_response(s) == pytest.approx(direct, rel=1e-12)
    assert tf(s) == pytest.approx(direct, rel=1e-12)


def test_improper_transfer_function_rejected():
    with pytest.raises(RepresentationError):
        tf_to_state_space(TransferFunction((1.0, 2.0), (1.0, 3.0)))
    with pytest.raises(RepresentationError):
        TransferFunction((1.0,), (0.0, 1.0))


def test_leading_coefficient_normalized():
    ss = tf_to_state_space(TransferFunction((4.0,), (2.0, 6.0)))
    assert ss.A.tolist() == [[-3.0]]
    assert ss.C.tolist() == [[2.0]]


def test_zoh_integrator():
    p = discretize(StateSpace(np.zeros((1, 1)), np.ones((1, 1)), np.ones((1, 1))), 0.1)
    assert p.Ad.tolist() == [[1.0]]
    assert p.Bd.tolist() == pytest.approx([0.1], abs=1e-15)


def test_zoh_first_order():
    p = discretize(StateSpace(-np.ones((1, 1)), np.ones((1, 1)), np.ones((1, 1))), 0.1)
    assert p.Ad[0, 0] == pytest.approx(math.exp(-0.1), abs=1e-15)
    assert p.Bd[0] == pytest.approx(1 - math.exp(-0.1), abs=1e-15)


def test_discretize_rejects_bad_sample_time():
    ss = tf_to_state_space(build_transfer_function(ActuatorParams()))
    for ts in (0.0, -0.1):
        with pytest.raises(ValueError):
            discretize(ss, ts)


def test_final_value_is_dc_gain():
    y = make_plant().simulate(np.ones(600))
    assert y[-1] == pytest.approx(0.025, abs=1e-6)


def test_zero_input_zero_output():
    p = make_plant()
    assert plant_step(p, 0.0) == 0.0
    assert np.all(p.simulate(np.zeros(200)) == 0.0)


def test_one_step_against_fine_rk4():
    p = make_plant()
    y1 = plant_step(p, 1.0)
    A, B, C = companion(NOMINAL_DEN, [0.75])
    ref = rk4_piecewise(A, B, C, [1.0], 0.1, 1000)[0]
    assert abs(y1 - ref) < 1e-8


def test_step_trajectory_against_modal_decomposition():
    y = make_plant().simulate(np.ones(600))
    t = 0.1 * np.arange(1, 601)
    ref = modal_step_response([0.75], NOMINAL_DEN, t)
    assert np.max(np.abs(y - ref)) < 1e-6


def test_nominal_poles():
    poles = sorted(build_transfer_function(ActuatorParams()).poles(), key=lambda z: (z.real, z.imag))
    expected = [-5, -3, complex(-0.5, -math.sqrt(7) / 2), complex(-0.5, math.sqrt(7) / 2)]
    np.testing.assert_allclose(poles, expected, atol=1e-10)
    assert all(p.real < 0 for p in poles)


def test_non_finite_input_rejected():
    p = make_plant()
    for bad in (math.nan, math.inf, -math.inf):
        with pytest.raises(PlantInputError):
            plant_step(p, bad)


def test_bounded_input_bounded_output():
    rng = np.random.default_rng(3)
    p = make_plant()
    u = rng.uniform(-1, 1, 100_000)
    y = p.simulate(u)
    # |y| <= ||impulse response||_1 * max|u|, generously under 0.1 for this plant
    assert np.all(np.isfinite(y)) and np.max(np.abs(y)) < 0.1


def test_reset_and_copy_are_independent():
    p = make_plant()
    p.step(1.0)
    q = p.copy()
    q.step(5.0)
    assert not np.array_equal(p.state, q.state)
    p.reset()
    assert np.all(p.state == 0)


signal = st.lists(st.floats(-100, 100), min_size=1, max_size=60)


@settings(max_examples=40, deadline=None)
@given(signal, st.floats(-50, 50))
def test_linearity(u, alpha):
    u = np.array(u)
    y = make_plant().simulate(u)
    ya = make_plant().simulate(alpha * u)
    np.testing.assert_allclose(ya, alpha * y, rtol=1e-10, atol=1e-12 * (1 + np.max(np.abs(ya))))


@settings(max_examples=40, deadline=None)
@given(st.data())
def test_superposition(data):
    n = data.draw(st.integers(1, 60))
    u1 = np.array(data.draw(st.lists(st.floats(-100, 100), min_size=n, max_size=n)))
    u2 = np.array(data.draw(st.lists(st.floats(-100, 100), min_size=n, max_size=n)))
    y = make_plant().simulate(u1 + u2)
    ys = make_plant().simulate(u1) + make_plant().simulate(u2)
    np.testing.assert_allclose(y, ys, rtol=1e-10, atol=1e-12 * (1 + np.max(np.abs(y))))


def test_zoh_matches_rk4_on_random_plants():
    rng = np.random.default_rng(11)
    for _ in range(10):
        vals = dict(zip(["inductance_L", "resistance_R", "mass_m", "damper_D", "spring_k", "relay_km",
                         "sensor_p"], rng.uniform(0.5, 5.0, 7)))
        params = ActuatorParams(**vals)
        tf = build_transfer_function(params)
        p = make_plant(params, 0.1)
        y = p.simulate(np.ones(100))
        A, B, C = companion(tf.denominator, tf.numerator)
        ref = rk4_piecewise(A, B, C, np.ones(100), 0.1, 10)
        assert np.max(np.abs(y - ref)) < 1e-6
