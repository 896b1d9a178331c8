import math
from dataclasses import replace

import numpy as np
import pytest
from numba import njit
from scipy.integrate import solve_ivp

from regulib.closed_loop import (
    ScenarioError,
    assemble_closed_loop,
    assemble_regulator_zero_dynamics,
    closed_loop_layout,
    compute_metrics,
    diagnostic_coordinates,
    initial_state,
    simulate,
)
from regulib.ode import integrate
from regulib.plant import Box, PlantNormalForm
from regulib.regulator import RegulatorParams
from regulib.scenarios import harmonic_q, stable_f0, zero_f1


def sigma_closed_form(rho, w):
    return (-2.0 * w[0] + rho * w[1]) / (rho**2 + 4.0)


def steady_state(rho, w):
    return np.array([rho, w[0], w[1], 0.0, 0.0, w[0], rho * w[1], rho**2, sigma_closed_form(rho, w)])


def reference_rhs(t, x, k=20.0, lam=5.0, ell=1.5):
    """The canonical closed loop written out by hand, for an independent integrator."""
    rho, w1, w2, z, e, xi1, xi2, th, X = x
    v = -k * e
    K1, K2 = 2.0 + lam, 2.0 * lam
    beta = X
    a = abs(th)
    if a <= ell:
        dz = 0.0
    elif a >= ell + 1:
        dz = th
    else:
        s = a - ell
        dz = math.copysign((3 * s * s - 2 * s**3) * (ell + 1) + s**3 - s * s, th)
    return [
        0.0,
        rho * w2,
        -rho * w1,
        -z,
        -w1 + z + xi1 + v,
        xi2 + K1 * v,
        -xi1 * th + (X * beta + K2) * v - X * dz,
        beta * v - dz,
        -2.0 * X - 2.0 * 0.0 + 1.0 * (-xi1),
    ]


def test_matches_independent_integrator(harmonic):
    scen = replace(harmonic, T=20.0, rho=(1.1,), w0=(0.6, 0.8))
    sim = simulate(scen)
    ref = solve_ivp(reference_rhs, (0.0, 20.0), initial_state(scen), method="DOP853", rtol=1e-12, atol=1e-12,
                    t_eval=sim.trajectory.times[::1000])
    assert np.max(np.abs(ref.y.T - sim.trajectory.states[::1000])) <= 1e-7


def test_layout_and_labels(harmonic):
    f = assemble_closed_loop(harmonic)
    assert f.labels == ("rho_1", "w_1", "w_2", "z_1", "e_1", "xi_1", "xi_2", "theta_hat_1", "X_1_1")
    lay = closed_loop_layout(harmonic)
    assert lay["xi"] == slice(5, 7) and lay.output_index == 4 and lay.dim == 9
    assert f.compiled


def test_steady_state_is_equilibrium_of_error(harmonic):
    f = assemble_closed_loop(harmonic)
    for rho, ph in ((1.0, 0.0), (0.8, 1.3), (1.2, 4.0)):
        w = (math.cos(ph), math.sin(ph))
        x = steady_state(rho, w)
        dx = f(0.0, x)
        assert dx[4] == pytest.approx(0.0, abs=1e-15)
        assert np.allclose(dx[5:7], [rho * w[1], -rho * rho * w[0]], atol=1e-14)
        assert dx[7] == 0.0
        assert dx[8] == pytest.approx((-2.0 * rho * w[1] - rho * rho * w[0]) / (rho**2 + 4.0), abs=1e-14)


@njit
def _zero_q(rho, w, z, e):
    return 0.0


def test_frozen_error_without_feedback(harmonic):
    plant = PlantNormalForm(1, 1, stable_f0, zero_f1, _zero_q, Box((-2.0,), (2.0,)))
    scen = replace(harmonic, plant=plant, regulator=replace(harmonic.regulator, k=0.0), w0=(0.0, 0.0), T=5.0)
    sim = simulate(scen)
    assert np.all(sim.output == 0.5)
    assert np.all(sim.block("xi") == 0.0)


def test_rho_constant_and_orbit_conserved(harmonic_run):
    assert np.all(harmonic_run.block("rho") == 1.0)
    w = harmonic_run.block("w")
    assert np.max(np.abs(np.sum(w**2, axis=1) - 1.0)) <= 1e-7


def test_rest_stays_at_rest(harmonic):
    scen = replace(harmonic, w0=(0.0, 0.0), z0=(0.0,), e0=(0.0,), T=10.0)
    sim = simulate(scen)
    assert np.max(np.abs(sim.output)) <= 1e-10


def test_canonical_run_regulates(harmonic_run):
    m = harmonic_run.metrics
    assert not harmonic_run.diverged
    assert m.terminal_error <= 1e-3 and m.regulated and m.bounded
    assert m.settling_time is not None and m.settling_time < 200.0
    assert len(harmonic_run.trajectory) == 200001


def test_metrics_recomputable(harmonic, harmonic_run):
    again = compute_metrics(harmonic_run.trajectory, harmonic_run.layout, harmonic)
    assert again == harmonic_run.metrics
    e = np.abs(harmonic_run.output)
    assert harmonic_run.metrics.terminal_error == np.max(e[-20001:])


def test_deadzone_inactive_in_steady_state(harmonic, harmonic_run):
    th = harmonic_run.block("theta_hat")
    tail = th[int(0.8 * len(th)) :]
    assert np.all(np.abs(tail) <= harmonic.regulator.ell)
    assert harmonic_run.metrics.deadzone_active_time == 0.0


def test_no_late_growth_over_long_horizon(harmonic):
    sim = simulate(replace(harmonic, T=500.0))
    states = sim.trajectory.states
    half = len(states) // 2
    for name, sl in sim.layout.blocks.items():
        norms = np.linalg.norm(states[:, sl], axis=1)
        assert np.isfinite(norms).all()
        assert norms[half:].max() <= 1.01 * norms[:half].max() + 1e-12, name


def test_wrong_sign_diverges_with_timestamp(harmonic):
    sim = simulate(replace(harmonic, stabilizer_sign=1.0))
    assert sim.diverged and 0.0 < sim.divergence_time < 200.0
    assert not sim.metrics.regulated
    assert sim.trajectory.times[-1] == sim.divergence_time


def test_simulation_is_deterministic(harmonic):
    scen = replace(harmonic, T=5.0)
    assert simulate(scen).trajectory.states.tobytes() == simulate(scen).trajectory.states.tobytes()


@pytest.mark.parametrize(
    "change",
    [
        {"rho": (1.5,)},
        {"w0": (2.0, 0.0)},
        {"e0": (1.5,)},
        {"z0": (3.0,)},
        {"xi0": (0.0,)},
        {"T": math.inf},
    ],
)
def test_scenario_invariants(harmonic, change):
    with pytest.raises(ScenarioError):
        replace(harmonic, **change).validate()


def test_regulator_shape_mismatch(harmonic):
    with pytest.raises(ScenarioError):
        replace(harmonic, regulator=RegulatorParams((1.0, 3.0, 2.0), 5.0, 20.0, 1.5)).validate()


def test_zero_dynamics_on_graph_follows_tau(harmonic):
    f = assemble_regulator_zero_dynamics(harmonic)
    assert f.labels == ("rho_1", "w_1", "w_2", "z_1", "eta_1", "eta_2", "theta_tilde_1", "X_1_1")
    for rho, ph in ((1.0, 0.0), (0.9, 2.0)):
        w = np.array([math.cos(ph), math.sin(ph)])
        x = np.array([rho, *w, 0.0, w[0], rho * w[1], 0.0, sigma_closed_form(rho, w)])
        dx = f(0.0, x)
        eps = 1e-5
        tau = lambda t: np.array([math.cos(ph - rho * t), rho * math.sin(ph - rho * t)])
        dtau = (tau(eps) - tau(-eps)) / (2 * eps)
        assert np.max(np.abs(dx[4:6] - dtau)) <= 1e-6
        assert dx[6] == 0.0


def test_zero_dynamics_adaptation_frozen_inside_deadzone(harmonic):
    f = assemble_regulator_zero_dynamics(harmonic)
    # X = 0 and Omega row 1 = 0 give beta = 0; theta_tilde + theta = 1.2 lies inside [-1.5, 1.5]
    x = np.array([1.0, 0.3, 0.4, 0.2, 0.7, -0.1, 0.2, 0.0])
    assert f(0.0, x)[6] == 0.0


def test_zero_dynamics_filter_decay_without_regressor(harmonic):
    @njit
    def no_omega(y):
        return np.zeros((2, 1))

    im = replace(harmonic.immersion, Omega=no_omega)
    scen = replace(harmonic, immersion=im)
    f = assemble_regulator_zero_dynamics(scen)
    x0 = np.array([1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0])
    traj = integrate(f, x0, 0.0, 3.0, 1e-3)
    assert np.max(np.abs(traj.states[:, 7] - np.exp(-2.0 * traj.times))) <= 1e-10


def test_diagnostic_coordinates(harmonic, harmonic_run):
    diag = diagnostic_coordinates(harmonic_run, harmonic)
    S = harmonic_run.trajectory.states
    i = np.argmin(np.abs(S[:, 4]))
    # with e = 0 the change of variables reduces to eta = xi - M (theta_hat - theta)
    expected = S[i, 5:7] - np.array([0.0, S[i, 8] * (S[i, 7] - 1.0)]) - harmonic.regulator.K * S[i, 4]
    assert np.allclose(diag.eta[i], expected, atol=1e-14)
    assert np.allclose(diag.tau, np.column_stack([S[:, 1], S[:, 2]]), atol=0)
    assert abs(diag.eta[-1] - diag.tau[-1]).max() <= 1e-2


def test_diagnostic_steady_state(harmonic):
    from regulib.closed_loop import SimResult, Trajectory

    rho, w = 1.0, (0.6, 0.8)
    x = steady_state(rho, w)
    traj = Trajectory(np.array([0.0]), x[None, :])
    lay = closed_loop_layout(harmonic)
    sim = SimResult("ss", traj, lay, "original", compute_metrics(traj, lay, harmonic))
    diag = diagnostic_coordinates(sim, harmonic)
    assert np.allclose(diag.eta[0], [w[0], rho * w[1]], atol=1e-15)
    assert diag.theta_tilde[0, 0] == 0.0
