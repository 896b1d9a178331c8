import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numba import njit

from regulib.errors import EvaluationError, SynthesisError
from regulib.plant import ImmersionData
from regulib.regulator import (
    RegulatorParams,
    RegulatorState,
    b_from_roots,
    beta,
    bigH,
    build_fg,
    control_output,
    deadzone_scalar,
    deadzone_vec,
    gain_K,
    regulator_rhs,
    saturate,
    synthesize,
    verify_mato_transform,
)
from regulib.scenarios import RHO_BOX, harmonic_immersion

ELL = 1.5


def test_deadzone_examples():
    assert deadzone_scalar(1.0, ELL) == 0.0
    assert deadzone_scalar(3.0, ELL) == 3.0
    assert deadzone_scalar(2.0, ELL) == pytest.approx(1.125, abs=1e-15)
    assert deadzone_scalar(-2.0, ELL) == pytest.approx(-1.125, abs=1e-15)


def test_deadzone_vec_examples():
    assert np.array_equal(deadzone_vec([0.5, -3.0], ELL), [0.0, -3.0])
    assert np.array_equal(deadzone_vec([0.0, 0.0], ELL), [0.0, 0.0])
    assert np.allclose(deadzone_vec([2.0, 2.0], ELL), [1.125, 1.125], atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(st.floats(-10.0, 10.0), st.floats(0.01, 5.0))
def test_deadzone_vec_matches_scalar(x, ell):
    assert deadzone_vec([x], ell)[0] == pytest.approx(deadzone_scalar(x, ell), abs=1e-14)


@settings(max_examples=200, deadline=None)
@given(st.floats(0.0, 5.0), st.floats(0.0, 5.0), st.floats(0.0, 4.0))
def test_deadzone_odd_monotone(x, y, ell):
    lo, hi = sorted((x, y))
    assert deadzone_scalar(-x, ell) == -deadzone_scalar(x, ell)
    assert deadzone_scalar(lo, ell) <= deadzone_scalar(hi, ell) + 1e-15
    v = deadzone_scalar(x, ell)
    assert v == 0.0 or np.sign(v) == np.sign(x)


@pytest.mark.parametrize("ell", [0.0, 0.5, 1.5, 3.0])
def test_deadzone_is_c1_at_knots(ell):
    eps = 1e-7
    for knot, slope in ((ell, 0.0), (ell + 1.0, 1.0)):
        left = (deadzone_scalar(knot, ell) - deadzone_scalar(knot - eps, ell)) / eps
        right = (deadzone_scalar(knot + eps, ell) - deadzone_scalar(knot, ell)) / eps
        assert left == pytest.approx(slope, abs=1e-5) and right == pytest.approx(slope, abs=1e-5)


def test_saturation():
    assert saturate(3.0, 10.0) == 3.0
    assert saturate(-20.0, 10.0) == -10.0
    assert saturate(5.0, math.inf) == 5.0
    assert saturate(10.0, 10.0) == pytest.approx(9.875, abs=1e-15)


def test_build_fg_examples():
    F, G = build_fg([1.0, 2.0])
    assert np.array_equal(F, [[-2.0]]) and np.array_equal(G, [[-2.0, 1.0]])
    F, G = build_fg([1.0, 3.0, 2.0])
    assert np.array_equal(F, [[-3.0, 1.0], [-2.0, 0.0]])
    assert np.array_equal(G, [[-3.0, 1.0, 0.0], [-2.0, 0.0, 1.0]])
    assert np.allclose(sorted(np.linalg.eigvals(F).real), [-2.0, -1.0], atol=1e-12)


def test_build_fg_errors():
    with pytest.raises(SynthesisError):
        build_fg([1.0, -1.0])
    with pytest.raises(SynthesisError):
        build_fg([1.0, 2.0, 1.0])
    with pytest.raises(SynthesisError):
        build_fg([2.0, 1.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-4.0, -0.1), min_size=1, max_size=5, unique=True))
def test_filter_eigenvalues_are_roots(roots):
    roots = sorted(roots)
    if min(np.diff(roots), default=1.0) <= 1e-3:
        return
    F, _ = build_fg(b_from_roots(roots))
    assert np.allclose(sorted(np.linalg.eigvals(F).real), roots, atol=1e-8)


def test_gain_K_examples():
    assert np.array_equal(gain_K([1.0, 2.0], 5.0), [7.0, 10.0])
    assert np.array_equal(gain_K([1.0, 0.0, 0.0], 2.5), [2.5, 0.0, 0.0])
    assert np.array_equal(gain_K([1.0, 3.0, 2.0], 1.0), [4.0, 5.0, 2.0])
    with pytest.raises(ValueError):
        gain_K([1.0, 2.0], 0.0)


def test_gain_K_linear_in_lambda():
    b = np.array([1.0, 3.0, 2.0])
    assert np.allclose(gain_K(b, 4.0) - gain_K(b, 1.5), 2.5 * b, atol=1e-14)


def test_beta_and_H_canonical():
    im = harmonic_immersion()
    params = RegulatorParams((1.0, 2.0), 5.0, 20.0, ELL)
    assert np.array_equal(beta([[0.4]], 0.7, im), [0.4])
    assert np.array_equal(beta([[0.0]], 0.7, im), [0.0])
    assert np.allclose(bigH([[0.4]], 0.7, params, im), [7.0, 10.16], atol=1e-15)
    assert np.array_equal(bigH([[0.0]], 0.7, params, im), params.K)
    base = bigH([[0.4]], 0.7, params, im) - params.K
    assert np.allclose(bigH([[0.8]], 0.7, params, im) - params.K, 4.0 * base, atol=1e-15)


def test_beta_three_dimensional():
    im = ImmersionData(3, 1, None, None, lambda y: np.zeros(3), lambda y: np.array([[0.0], [0.0], [-y]]))
    assert np.array_equal(beta([[0.3], [0.9]], 1.0, im), [0.3])


def test_regulator_rhs_zero_state():
    im = ImmersionData(2, 1, None, None, lambda y: np.zeros(2), lambda y: np.zeros((2, 1)))
    params = RegulatorParams((1.0, 2.0), 5.0, 20.0, ELL)
    der = regulator_rhs(RegulatorState.zeros(2, 1), 0.0, 0.0, params, im)
    assert np.all(der.pack() == 0.0)


def test_regulator_rhs_canonical():
    im = harmonic_immersion()
    params = RegulatorParams((1.0, 2.0), 5.0, 20.0, ELL)
    der = regulator_rhs(RegulatorState([1.0, 0.0], [1.0], [[0.0]]), 0.0, 0.0, params, im)
    assert np.array_equal(der.xi, [0.0, -1.0])
    assert np.array_equal(der.theta_hat, [0.0])
    assert np.array_equal(der.X, [[-1.0]])
    der = regulator_rhs(RegulatorState([0.0, 0.0], [3.0], [[0.0]]), 0.0, 0.0, params, im)
    assert np.array_equal(der.theta_hat, [-3.0])


def test_regulator_rhs_nonfinite_map():
    im = ImmersionData(2, 1, None, None, lambda y: np.array([np.nan, 0.0]), lambda y: np.zeros((2, 1)))
    params = RegulatorParams((1.0, 2.0), 5.0, 20.0, ELL)
    with pytest.raises(EvaluationError):
        regulator_rhs(RegulatorState.zeros(2, 1), 0.0, 0.0, params, im)


def test_regulator_rhs_matches_compiled_block():
    from regulib.closed_loop import _regulator_block

    im = ImmersionData(3, 2, None, None,
                       lambda y: np.array([0.1 * y, y * y, -y]),
                       lambda y: np.array([[0.2, -y], [y, 1.0], [-y, 0.5 * y]]))
    params = RegulatorParams(tuple(b_from_roots([-1.0, -3.0])), 2.0, 4.0, 0.8, q_dim=2)
    rng = np.random.default_rng(11)
    for _ in range(20):
        st_ = RegulatorState(rng.standard_normal(3), 2.0 * rng.standard_normal(2), rng.standard_normal((2, 2)))
        v = rng.standard_normal()
        ref = regulator_rhs(st_, 0.0, v, params, im).pack()
        y = st_.xi[0]
        out = np.zeros(3 + 2 + 4)
        _regulator_block(out, 0, st_.xi, st_.theta_hat, st_.X.reshape(-1), v, im.phi(y), im.Omega(y),
                         params.K, params.F.reshape(-1), params.G.reshape(-1), params.ell, 3, 2)
        assert np.allclose(out, ref, atol=1e-13)


def test_control_output():
    params = RegulatorParams((1.0, 2.0), 5.0, 10.0, ELL)
    assert control_output(RegulatorState([0.0, 0.0], [0.0], [[0.0]]), 0.0, params) == (0.0, 0.0)
    u, v = control_output(RegulatorState([2.0, 0.0], [0.0], [[0.0]]), 0.1, params)
    assert v == pytest.approx(-1.0, abs=1e-15) and u == pytest.approx(1.0, abs=1e-15)
    u2, _ = control_output(RegulatorState([2.0, 0.0], [0.0], [[0.0]]), 0.1 + 1e-3, params)
    assert (u2 - u) / 1e-3 == pytest.approx(-10.0, rel=1e-9)


def test_params_validation():
    with pytest.raises(SynthesisError):
        RegulatorParams((1.0, 2.0), 0.0, 1.0, ELL)
    with pytest.raises(SynthesisError):
        RegulatorParams((1.0, 2.0), 1.0, -1.0, ELL)
    params = RegulatorParams((1.0, 2.0), 5.0, 20.0, 1.4)
    with pytest.raises(SynthesisError):
        params.check_deadzone(harmonic_immersion(), RHO_BOX)
    assert RegulatorParams((1.0, 2.0), 5.0, 20.0, ELL).check_deadzone(harmonic_immersion(), RHO_BOX) == pytest.approx(1.44)


def test_synthesize_defaults():
    params = synthesize(harmonic_immersion(), RHO_BOX, lam=5.0, k=20.0)
    assert params.b == (1.0, 1.0)
    assert params.ell == pytest.approx(1.05 * 1.44, abs=1e-12)


def test_mato_canonical():
    params = RegulatorParams((1.0, 2.0), 5.0, 20.0, ELL)
    A = np.array([[0.0, 1.0], [0.0, 0.0]])
    assert np.array_equal(A - np.outer(params.K, [1.0, 0.0]), [[-7.0, 1.0], [-10.0, 0.0]])
    rep = verify_mato_transform(params)
    assert rep.passed and rep.failures == []
    assert rep.similarity == 0.0 and rep.input_vector == 0.0 and rep.output_vector == 0.0


def test_mato_report_lists_failures():
    params = RegulatorParams((1.0, 2.0), 5.0, 20.0, ELL)
    object.__setattr__(params, "K", params.K + np.array([0.0, 1e-3]))
    rep = verify_mato_transform(params)
    assert not rep.passed and rep.failures == ["T(A-KC)T^-1"]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3.0, -0.2), min_size=1, max_size=4, unique=True), st.floats(0.1, 20.0))
def test_mato_random(roots, lam):
    roots = sorted(roots)
    if min(np.diff(roots), default=1.0) <= 1e-3:
        return
    params = RegulatorParams(tuple(b_from_roots(roots)), lam, 1.0, ELL)
    assert verify_mato_transform(params).passed


def test_deadzone_positivity():
    rng = np.random.default_rng(5)
    q = 3
    for _ in range(10_000):
        theta = rng.uniform(-ELL, ELL, q)
        tt = rng.uniform(-6.0, 6.0, q)
        assert tt @ deadzone_vec(tt + theta, ELL) >= -1e-12


def test_deadzone_coercivity_floor():
    rng = np.random.default_rng(6)
    q = 2
    delta = math.sqrt(q) * (2 * ELL + 1) + 0.1
    ratios = []
    for _ in range(10_000):
        theta = rng.uniform(-ELL, ELL, q)
        direction = rng.standard_normal(q)
        tt = direction / np.linalg.norm(direction) * rng.uniform(delta, 4 * delta)
        ratios.append(2 * tt @ deadzone_vec(tt + theta, ELL) / (tt @ tt))
    assert min(ratios) > 0
