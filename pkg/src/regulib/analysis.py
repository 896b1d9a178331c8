"""Steady-state filter map, excitation test, Lyapunov monitor, decay fits and gain escalation."""
from __future__ import annotations

import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional

import numpy as np
from numba import njit
from scipy.integrate import trapezoid
from scipy.linalg import expm

from .closed_loop import Diagnostics, Scenario, ScenarioError, filter_field, simulate
from .errors import AnalysisError, AssumptionWarning, DivergenceError, SynthesisError
from .ode import Trajectory, VectorField, eig_min_symmetric, integrate, solve_lyapunov
from .plant import AugmentedPoint, Exosystem, ImmersionData, PlantNormalForm, zero_dynamics_field
from .regulator import RegulatorParams

SIGMA_TAIL_TOL = 1e-10
BACKWARD_BOUND = 1e6


def _omega_rows(im: ImmersionData, rho, w, z) -> np.ndarray:
    """Omega(tau_1) sampled along a path, shape (N, d, q)."""
    out = np.empty((rho.shape[0], im.d, im.q_dim))
    for i in range(rho.shape[0]):
        y = float(np.asarray(im.tau(rho[i], w[i], z[i]))[0])
        out[i] = np.asarray(im.Omega(y), dtype=float).reshape(im.d, im.q_dim)
    return out


@lru_cache(maxsize=None)
def _reversed(kernel, jit):
    def back(t, x, prm):
        return -kernel(t, x, prm)

    return njit(nogil=True)(back) if jit else back


def _decay_margin(F) -> float:
    return float(np.min(np.abs(np.linalg.eigvals(F).real)))


@dataclass(frozen=True)
class SigmaValue:
    value: np.ndarray
    tail_bound: float
    T_sigma: float


def sigma_map(
    pt: AugmentedPoint,
    im: ImmersionData,
    params: RegulatorParams,
    plant: PlantNormalForm,
    exo: Exosystem,
    T_sigma: Optional[float] = None,
    h: float = 1e-3,
) -> SigmaValue:
    """sigma(pt) = int_{-inf}^0 e^{-F s} G Omega(tau_1(z(s))) ds.

    The zero dynamics are integrated backwards from ``pt``; the integral is
    truncated at -T_sigma and evaluated with the trapezoid rule on the
    integration grid.  The reported tail bound is
    |G| sup|Omega| e^{-mu T_sigma} / mu with mu = min |Re eig F|.
    """
    d, qd = im.d, im.q_dim
    if d == 1:
        return SigmaValue(np.zeros((0, qd)), 0.0, 0.0)
    F, G = params.F, params.G
    mu = _decay_margin(F)
    gnorm = float(np.linalg.norm(G, 2))
    fwd = zero_dynamics_field(plant, exo)
    back = VectorField(fwd.dim, kernel=_reversed(fwd.kernel, fwd.compiled), labels=fwd.labels)
    p, s_dim = exo.p, exo.s_dim
    horizon = 30.0 / mu if T_sigma is None else float(T_sigma)
    while True:
        inflated = False
        try:
            traj = integrate(back, pt.as_vector(), 0.0, horizon, h, bound=BACKWARD_BOUND)
        except DivergenceError as exc:
            warnings.warn(f"backward zero dynamics left the bounded region at s=-{exc.t:.4g}", AssumptionWarning)
            traj, inflated = exc.trajectory, True
        S = traj.states
        Om = _omega_rows(im, S[:, :p], S[:, p : p + s_dim], S[:, p + s_dim :])
        sup_om = float(np.max(np.linalg.norm(Om.reshape(Om.shape[0], -1), axis=1)))
        tail = math.inf if inflated else gnorm * sup_om * math.exp(-mu * traj.times[-1]) / mu
        if T_sigma is None and not inflated and tail > SIGMA_TAIL_TOL and sup_om > 0:
            horizon = (math.log(gnorm * sup_om / (mu * SIGMA_TAIL_TOL)) + 1.0) / mu
            T_sigma = horizon
            continue
        break
    step = expm(F * traj.times[1]) if len(traj) > 1 else np.eye(d - 1)
    E = np.eye(d - 1)
    acc = np.zeros((d - 1, qd))
    n = len(traj)
    for j in range(n):
        wgt = 0.5 if j in (0, n - 1) else 1.0
        acc += wgt * (E @ (G @ Om[j]))
        E = E @ step
    h_eff = traj.times[1] - traj.times[0] if n > 1 else 0.0
    return SigmaValue(acc * h_eff, tail, float(traj.times[-1]))


@dataclass(frozen=True)
class GraphReport:
    deviation: float
    envelope_deviation: float
    perturbation: float
    T: float

    def passed(self, tol: float = 1e-6) -> bool:
        return self.deviation <= tol and self.envelope_deviation <= tol


def _filter_run(pt, X0, im, params, plant, exo, T, h):
    fld = filter_field(plant, exo, im, params)
    x0 = np.concatenate([pt.as_vector(), np.asarray(X0, dtype=float).reshape(-1)])
    return integrate(fld, x0, 0.0, T, h)


def verify_graph_invariance(
    pt: AugmentedPoint,
    im: ImmersionData,
    params: RegulatorParams,
    plant: PlantNormalForm,
    exo: Exosystem,
    T: float = 20.0,
    h: float = 1e-3,
    n_check: int = 41,
    perturbation: float = 1.0,
) -> GraphReport:
    """Max deviation of X(t) from sigma(z(t)) starting on the graph, plus the
    explicit solution X(t) = e^{Ft}[X0 - sigma(z0)] + sigma(z(t)) from X0 = sigma + perturbation."""
    d, qd = im.d, im.q_dim
    p, s_dim = exo.p, exo.s_dim
    sig0 = sigma_map(pt, im, params, plant, exo, h=h).value
    on = _filter_run(pt, sig0, im, params, plant, exo, T, h)
    off = _filter_run(pt, sig0 + perturbation, im, params, plant, exo, T, h)
    idx = np.unique(np.linspace(0, len(on) - 1, n_check).round().astype(int))
    nz = p + s_dim + plant.n
    dev = env = 0.0
    for i in idx:
        zi = AugmentedPoint.from_vector(on.states[i, :nz], p, s_dim)
        sig = sigma_map(zi, im, params, plant, exo, h=h).value
        X_on = on.states[i, nz:].reshape(d - 1, qd)
        X_off = off.states[i, nz:].reshape(d - 1, qd)
        pred = expm(params.F * on.times[i]) @ np.full((d - 1, qd), perturbation) + sig
        dev = max(dev, float(np.max(np.abs(X_on - sig), initial=0.0)))
        env = max(env, float(np.max(np.abs(X_off - pred), initial=0.0)))
    return GraphReport(dev, env, perturbation, T)


@dataclass(frozen=True)
class PEReport:
    window: tuple
    gram: np.ndarray
    min_eig: float
    threshold: float

    @property
    def passed(self) -> bool:
        return self.min_eig > self.threshold

    def as_dict(self) -> dict:
        return {
            "window": list(self.window),
            "gram": self.gram.tolist(),
            "min_eig": self.min_eig,
            "threshold": self.threshold,
            "pass": self.passed,
        }


def pe_gram(
    pt: AugmentedPoint,
    im: ImmersionData,
    params: RegulatorParams,
    plant: PlantNormalForm,
    exo: Exosystem,
    L: float,
    h: float = 1e-3,
    threshold: Optional[float] = None,
) -> PEReport:
    """Gram matrix of beta(sigma(z(t)), tau_1(z(t))) over [0, L] along the attractor.

    The step is shrunk to L / ceil(L / h) so the window is covered exactly.
    """
    if not L > 0:
        raise ValueError("window length must be positive")
    d, qd = im.d, im.q_dim
    p, s_dim = exo.p, exo.s_dim
    h_eff = L / math.ceil(L / h - 1e-9)
    sig0 = sigma_map(pt, im, params, plant, exo, h=h).value if d > 1 else np.zeros((0, qd))
    if d > 1:
        traj = _filter_run(pt, sig0, im, params, plant, exo, L, h_eff)
    else:
        traj = integrate(zero_dynamics_field(plant, exo), pt.as_vector(), 0.0, L, h_eff)
    S = traj.states
    nz = p + s_dim + plant.n
    Om = _omega_rows(im, S[:, :p], S[:, p : p + s_dim], S[:, p + s_dim : nz])
    phi = Om[:, 0, :].copy()
    if d > 1:
        phi += S[:, nz : nz + qd]
    outer = phi[:, :, None] * phi[:, None, :]
    gram = trapezoid(outer, traj.times, axis=0)
    gram = 0.5 * (gram + gram.T)
    thr = 1e-6 * L if threshold is None else float(threshold)
    return PEReport((0.0, float(traj.times[-1])), gram, eig_min_symmetric(gram), thr)


@dataclass(frozen=True)
class LyapunovReport:
    times: np.ndarray
    V: np.ndarray
    max_increment: float

    def passed(self, tol: float = 1e-9) -> bool:
        return self.max_increment <= tol


def lyapunov_monitor(traj: Trajectory, scenario: Scenario, on_attractor: bool = True) -> LyapunovReport:
    """V = chi_1^2 + zeta^T P zeta + theta_tilde^T theta_tilde along a regulator zero-dynamics run.

    chi = eta - tau(z), zeta = b_hat chi_1 + chi_2 with b_hat = -(b_2..b_d),
    and P F + F^T P = -I.  Monotonicity is only expected for starts on the
    attractor; otherwise a residual term enters and a warning is emitted.
    """
    if not on_attractor:
        warnings.warn("start is off the attractor; V is not expected to be monotone", AssumptionWarning)
    im, reg, exo = scenario.immersion, scenario.regulator, scenario.exo
    d, qd = im.d, im.q_dim
    p, s_dim = exo.p, exo.s_dim
    n_loop = traj.dim - p - s_dim - d - qd - (d - 1) * qd
    S = traj.states
    rho, w = S[:, :p], S[:, p : p + s_dim]
    z = S[:, p + s_dim : p + s_dim + scenario.plant.n]
    o = p + s_dim + n_loop
    eta = S[:, o : o + d]
    tt = S[:, o + d : o + d + qd]
    tau = np.array([np.asarray(im.tau(rho[i], w[i], z[i]), dtype=float) for i in range(S.shape[0])])
    chi = eta - tau
    zeta = chi[:, :1] * (-reg.b_vec[1:]) + chi[:, 1:]
    V = chi[:, 0] ** 2 + np.sum(tt**2, axis=1)
    if d > 1:
        P = solve_lyapunov(reg.F)
        V = V + np.einsum("ti,ij,tj->t", zeta, P, zeta)
    inc = float(np.max(np.diff(V), initial=-math.inf))
    return LyapunovReport(traj.times, V, inc)


def sigma_along(diag: Diagnostics, scenario: Scenario, h: Optional[float] = None) -> np.ndarray:
    """sigma(z(t)) on the diagnostic grid.

    Starts from sigma(z(0)) and propagates X_dot = F X + G Omega(tau_1(z(t)))
    with the exact first-order-hold discretisation of the sampled input.
    """
    im, reg = scenario.immersion, scenario.regulator
    d, qd = im.d, im.q_dim
    N = diag.times.shape[0]
    if d == 1:
        return np.zeros((N, 0))
    h = float(diag.times[1] - diag.times[0]) if h is None else h
    m = d - 1
    # augmented exponential: [[F, G, 0], [0, 0, I/h], [0, 0, 0]]
    Z = np.zeros((m + 2 * d, m + 2 * d))
    Z[:m, :m] = reg.F
    Z[:m, m : m + d] = reg.G
    Z[m : m + d, m + d :] = np.eye(d) / h
    E = expm(Z * h)
    Phi = E[:m, :m]
    Gam0 = E[:m, m : m + d]
    Gam1 = E[:m, m + d :]
    U = _omega_rows(im, diag.rho, diag.w, diag.z)
    out = np.empty((N, m, qd))
    out[0] = sigma_map(diag.point(0), im, reg, scenario.plant, scenario.exo, h=h).value
    for i in range(N - 1):
        out[i + 1] = Phi @ out[i] + Gam0 @ U[i] + Gam1 @ (U[i + 1] - U[i])
    return out.reshape(N, -1)


def limit_set_distance(diag: Diagnostics, scenario: Scenario, sigma: Optional[np.ndarray] = None) -> np.ndarray:
    """Euclidean distance of (eta, theta_tilde, X) to (tau(z), 0, sigma(z)) per sample."""
    if sigma is None:
        sigma = sigma_along(diag, scenario)
    sq = np.sum((diag.eta - diag.tau) ** 2, axis=1) + np.sum(diag.theta_tilde**2, axis=1)
    sq += np.sum((diag.X - sigma) ** 2, axis=1)
    return np.sqrt(sq)


@dataclass(frozen=True)
class DecayFit:
    rate: float
    prefactor: float
    rmse: float
    n_samples: int

    def as_dict(self) -> dict:
        return {"rate": self.rate, "prefactor": self.prefactor, "rmse": self.rmse, "n_samples": self.n_samples}


def fit_exponential_decay(dist, times, skip: float = 0.3) -> DecayFit:
    """Least-squares fit of log dist = log M - a t after dropping the first ``skip`` of the horizon."""
    dist = np.asarray(dist, dtype=float)
    times = np.asarray(times, dtype=float)
    if dist.shape != times.shape:
        raise AnalysisError("distances and times must have equal length")
    if not 0 <= skip < 1:
        raise AnalysisError("skip fraction must lie in [0, 1)")
    t_cut = times[0] + skip * (times[-1] - times[0])
    keep = (times >= t_cut) & np.isfinite(dist)
    if np.count_nonzero(keep) < 10:
        raise AnalysisError(f"only {np.count_nonzero(keep)} usable samples, need at least 10")
    t = times[keep]
    y = np.log(np.maximum(dist[keep], 1e-14))
    slope, icpt = np.polyfit(t, y, 1)
    resid = y - (slope * t + icpt)
    return DecayFit(float(-slope), float(math.exp(icpt)), float(np.sqrt(np.mean(resid**2))), int(t.size))


# ------------------------------------------------------------------ escalation


@dataclass(frozen=True)
class Trial:
    value: float
    passed: bool
    diverged: bool
    divergence_time: Optional[float]
    terminal_error: Optional[float]
    bounded: bool
    note: str = ""

    def as_dict(self) -> dict:
        return {
            "value": self.value,
            "passed": self.passed,
            "diverged": self.diverged,
            "divergence_time": self.divergence_time,
            "terminal_error": self.terminal_error,
            "bounded": self.bounded,
            "note": self.note,
        }


@dataclass(frozen=True)
class ProbeReport:
    gain: str
    floor: float
    max_doublings: int
    ladder: tuple
    passing_value: Optional[float]

    @property
    def exhausted(self) -> bool:
        return self.passing_value is None

    @property
    def last_divergence_time(self) -> Optional[float]:
        times = [t.divergence_time for t in self.ladder if t.diverged]
        return times[-1] if times else None

    def as_dict(self) -> dict:
        return {
            "gain": self.gain,
            "floor": self.floor,
            "max_doublings": self.max_doublings,
            "passing_value": self.passing_value,
            "exhausted": self.exhausted,
            "last_divergence_time": self.last_divergence_time,
            "ladder": [t.as_dict() for t in self.ladder],
        }


DEFAULT_FLOORS = {"k": 0.01, "g": 2.0, "lam": 1.0}


def _trial(template: Scenario, gain: str, value: float) -> Trial:
    try:
        scen = template.with_gain(gain, value)
        sim = simulate(scen)
    except (SynthesisError, ScenarioError) as exc:
        return Trial(value, False, False, None, None, False, note=str(exc))
    m = sim.metrics
    return Trial(value, m.regulated, sim.diverged, sim.divergence_time, m.terminal_error, m.bounded)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("REGULIB_THREADS", "1")))
    except ValueError:
        return 1


def small_gain_probe(
    template: Scenario,
    gain: str,
    max_doublings: int = 11,
    floor: Optional[float] = None,
    threads: Optional[int] = None,
) -> ProbeReport:
    """Double ``gain`` from ``floor`` until a run is bounded with terminal |e| <= tol_e.

    Trials are independent simulations; with several threads they are run
    in batches and the smallest passing value wins.  The ladder stops at
    the first pass.
    """
    if max_doublings < 1:
        raise ValueError("max_doublings must be at least 1")
    if gain == "lambda":
        gain = "lam"
    if gain not in DEFAULT_FLOORS:
        raise ValueError(f"unknown gain {gain!r}; expected one of k, g, lam")
    floor = DEFAULT_FLOORS[gain] if floor is None else float(floor)
    if not floor > 0:
        raise ValueError("floor must be positive")
    values = [floor * 2.0**j for j in range(max_doublings + 1)]
    threads = _threads() if threads is None else max(1, int(threads))
    ladder = []
    if threads == 1:
        for v in values:
            ladder.append(_trial(template, gain, v))
            if ladder[-1].passed:
                break
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for start in range(0, len(values), threads):
                batch = list(pool.map(lambda v: _trial(template, gain, v), values[start : start + threads]))
                for t in batch:
                    ladder.append(t)
                    if t.passed:
                        break
                if ladder[-1].passed:
                    break
    passing = ladder[-1].value if ladder[-1].passed else None
    return ProbeReport(gain, floor, max_doublings, tuple(ladder), passing)


# --------------------------------------------------------------- report suites


def attractor_point(scenario: Scenario, t_burn: float = 30.0) -> AugmentedPoint:
    """Point reached by the zero dynamics from the scenario's (rho, w0, z0) after ``t_burn``."""
    exo = scenario.exo
    x0 = np.concatenate([scenario.rho, scenario.w0, scenario.z0])
    traj = integrate(zero_dynamics_field(scenario.plant, exo), x0, 0.0, t_burn, scenario.h)
    return AugmentedPoint.from_vector(traj.final, exo.p, exo.s_dim)


def perturbed_zero_dynamics_run(
    scenario: Scenario, chi1: float = 0.1, theta_offset: float = 0.5, T: float = 100.0, pt: AugmentedPoint = None
) -> Trajectory:
    """Regulator zero dynamics from an attractor point with eta = tau + chi1 e_1,
    theta_tilde = theta_offset and X = sigma."""
    from .closed_loop import assemble_regulator_zero_dynamics

    if scenario.plant.r > 1:
        raise AnalysisError("perturbed zero-dynamics runs need a relative-degree-one plant")
    im = scenario.immersion
    pt = attractor_point(scenario) if pt is None else pt
    tau = np.asarray(im.tau(pt.rho, pt.w, pt.z), dtype=float)
    eta = tau.copy()
    eta[0] += chi1
    sig = sigma_map(pt, im, scenario.regulator, scenario.plant, scenario.exo, h=scenario.h).value
    x0 = np.concatenate([pt.as_vector(), eta, np.full(im.q_dim, theta_offset), sig.reshape(-1)])
    return integrate(assemble_regulator_zero_dynamics(scenario), x0, 0.0, T, scenario.h)


def immersion_check(scenario: Scenario, n: int = 20, t_burn: float = 30.0, fd_step: float = 1e-5) -> dict:
    from .plant import attractor_sample, immersion_residual

    pts = attractor_sample(scenario.plant, scenario.exo, n, t_burn, h=scenario.h, seed=scenario.seed)
    ode = out = 0.0
    for pt in pts:
        r_ode, r_out = immersion_residual(scenario.immersion, scenario.plant, scenario.exo, pt, fd_step)
        ode = max(ode, float(np.max(np.abs(r_ode))))
        out = max(out, abs(float(r_out)))
    return {"samples": n, "fd_step": fd_step, "max_res_ode": ode, "max_res_out": out}


def run_analyses(scenario: Scenario, sim, names, pe_window: float = 2.0 * math.pi) -> dict:
    """Requested analysis reports as JSON-ready dictionaries."""
    from .closed_loop import diagnostic_coordinates
    from .regulator import verify_mato_transform

    im, reg, plant, exo = scenario.immersion, scenario.regulator, scenario.plant, scenario.exo
    out = {}
    pt = attractor_point(scenario) if set(names) & {"sigma", "graph", "pe", "lyapunov"} else None
    for name in names:
        if name == "mato":
            out[name] = verify_mato_transform(reg).as_dict()
        elif name == "immersion":
            out[name] = immersion_check(scenario)
        elif name == "sigma":
            sv = sigma_map(pt, im, reg, plant, exo, h=scenario.h)
            out[name] = {"point": pt.as_vector().tolist(), "value": sv.value.tolist(),
                         "tail_bound": sv.tail_bound, "T_sigma": sv.T_sigma}
        elif name == "graph":
            g = verify_graph_invariance(pt, im, reg, plant, exo, h=scenario.h)
            out[name] = {"deviation": g.deviation, "envelope_deviation": g.envelope_deviation, "T": g.T}
        elif name == "pe":
            out[name] = pe_gram(pt, im, reg, plant, exo, pe_window, h=scenario.h).as_dict()
        elif name == "lyapunov":
            rep = lyapunov_monitor(perturbed_zero_dynamics_run(scenario, pt=pt), scenario)
            out[name] = {"max_increment": rep.max_increment, "V0": float(rep.V[0]), "V_final": float(rep.V[-1])}
        elif name == "limit_set":
            if sim.diverged:
                out[name] = {"skipped": "run diverged"}
                continue
            diag = diagnostic_coordinates(sim, scenario)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", AssumptionWarning)
                dist = limit_set_distance(diag, scenario)
            fit = fit_exponential_decay(dist, diag.times)
            out[name] = {"initial": float(dist[0]), "final": float(dist[-1]), "decay": fit.as_dict()}
        else:
            raise ValueError(f"unknown analysis {name!r}")
    return out


def structural_checks(scenario: Scenario, pe_window: float = 2.0 * math.pi, tol: float = 1e-6) -> dict:
    """Transform identities, immersion residuals, excitation and graph invariance, each with a verdict."""
    from .regulator import verify_mato_transform

    im, reg, plant, exo = scenario.immersion, scenario.regulator, scenario.plant, scenario.exo
    pt = attractor_point(scenario)
    mato = verify_mato_transform(reg).as_dict()
    imm = immersion_check(scenario)
    imm["passed"] = max(imm["max_res_ode"], imm["max_res_out"]) <= tol
    pe = pe_gram(pt, im, reg, plant, exo, pe_window, h=scenario.h).as_dict()
    pe["passed"] = pe.pop("pass")
    g = verify_graph_invariance(pt, im, reg, plant, exo, h=scenario.h)
    graph = {"deviation": g.deviation, "envelope_deviation": g.envelope_deviation, "T": g.T, "passed": g.passed(tol)}
    return {"mato": mato, "immersion": imm, "pe": pe, "graph": graph}
