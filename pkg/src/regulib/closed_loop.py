"""Closed-loop assembly, simulation and diagnostic coordinates."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional

import numpy as np
from numba import njit
from numba.extending import is_jitted

from .errors import DivergenceError, RegulibError
from .ode import Trajectory, VectorField, integrate
from .plant import AugmentedPoint, Exosystem, ImmersionData, PlantNormalForm
from .reduction import ReductionParams, reduce_plant, to_reduced_coordinates
from .regulator import RegulatorParams, deadzone_scalar, deadzone_vec, saturate


class ScenarioError(RegulibError, ValueError):
    """Scenario data violates its construction invariants."""


@dataclass(frozen=True)
class Scenario:
    name: str
    plant: PlantNormalForm
    exo: Exosystem
    immersion: ImmersionData
    regulator: RegulatorParams
    rho: tuple
    w0: tuple
    z0: tuple
    e0: tuple
    reduction: Optional[ReductionParams] = None
    xi0: Optional[tuple] = None
    theta_hat0: Optional[tuple] = None
    X0: Optional[tuple] = None
    T: float = 200.0
    h: float = 1e-3
    seed: int = 0
    tol_e: float = 1e-3
    terminal_fraction: float = 0.1
    divergence_bound: float = 1e6
    stabilizer_sign: float = -1.0

    def __post_init__(self):
        d, qd = self.immersion.d, self.immersion.q_dim
        as_tuple = lambda v: tuple(float(x) for x in np.atleast_1d(np.asarray(v, dtype=float)).reshape(-1))
        for name in ("rho", "w0", "z0", "e0"):
            object.__setattr__(self, name, as_tuple(getattr(self, name)))
        defaults = {"xi0": np.zeros(d), "theta_hat0": np.zeros(qd), "X0": np.zeros((d - 1) * qd)}
        for name, default in defaults.items():
            value = getattr(self, name)
            object.__setattr__(self, name, as_tuple(default if value is None else value))

    def validate(self) -> "Scenario":
        d, qd = self.immersion.d, self.immersion.q_dim
        checks = [
            (len(self.rho) == self.exo.p, "rho has wrong length"),
            (len(self.w0) == self.exo.s_dim, "w0 has wrong length"),
            (len(self.z0) == self.plant.n, "z0 has wrong length"),
            (len(self.e0) == self.plant.r, "e0 has wrong length"),
            (len(self.xi0) == d, "xi0 has wrong length"),
            (len(self.theta_hat0) == qd, "theta_hat0 has wrong length"),
            (len(self.X0) == (d - 1) * qd, "X0 has wrong length"),
            (self.regulator.d == d, "regulator b has wrong length for the immersion"),
            (self.regulator.q_dim == qd, "regulator q_dim does not match the immersion"),
            (self.T > 0 and math.isfinite(self.T), "horizon must be finite and positive"),
            (self.h > 0, "step must be positive"),
            (0 < self.terminal_fraction <= 1, "terminal_fraction must lie in (0, 1]"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ScenarioError(f"{self.name}: {msg}")
        if not self.exo.param_box.contains(self.rho):
            raise ScenarioError(f"{self.name}: rho={self.rho} outside parameter box")
        if not self.exo.W0.contains(self.w0):
            raise ScenarioError(f"{self.name}: w0={self.w0} outside W0")
        if self.plant.n and not self.plant.Z0.contains(self.z0):
            raise ScenarioError(f"{self.name}: z0={self.z0} outside Z0")
        if not self.plant.E0.contains(self.e0):
            raise ScenarioError(f"{self.name}: e0={self.e0} outside |e_i| <= {self.plant.c}")
        if self.plant.r > 1 and self.reduction is None:
            raise ScenarioError(f"{self.name}: relative degree {self.plant.r} needs reduction parameters")
        if self.reduction is not None and self.reduction.r != self.plant.r:
            raise ScenarioError(f"{self.name}: reduction is for r={self.reduction.r}")
        return self

    def with_gain(self, name: str, value: float) -> "Scenario":
        if name == "k":
            return replace(self, regulator=replace(self.regulator, k=value))
        if name in ("lam", "lambda"):
            return replace(self, regulator=replace(self.regulator, lam=value))
        if name == "g":
            if self.reduction is None:
                raise ScenarioError(f"{self.name}: no reduction gain to set")
            return replace(self, reduction=replace(self.reduction, g=value))
        raise ValueError(f"unknown gain {name!r}")

    @property
    def theta_true(self) -> np.ndarray:
        return np.atleast_1d(np.asarray(self.immersion.theta(np.array(self.rho)), dtype=float))


# --------------------------------------------------------------------- kernels


@njit(nogil=True)
def _regulator_block(out, off, xi, th, Xf, v, ph, Om, K, F, G, ell, d, qd):
    """Write xi_dot, theta_hat_dot, X_dot into out[off:]."""
    dz = np.empty(qd)
    beta = np.empty(qd)
    for j in range(qd):
        dz[j] = deadzone_scalar(th[j], ell)
        beta[j] = Om[0, j] + (Xf[j] if d > 1 else 0.0)
    for i in range(d):
        acc = ph[i] + K[i] * v
        if i < d - 1:
            acc += xi[i + 1]
        for j in range(qd):
            acc += Om[i, j] * th[j]
            if i > 0:
                acc += Xf[(i - 1) * qd + j] * (beta[j] * v - dz[j])
        out[off + i] = acc
    for j in range(qd):
        out[off + d + j] = beta[j] * v - dz[j]
    m = d - 1
    for i in range(m):
        for j in range(qd):
            acc = 0.0
            for l in range(m):
                acc += F[i * m + l] * Xf[l * qd + j]
            for l in range(d):
                acc += G[i * d + l] * Om[l, j]
            out[off + d + qd + i * qd + j] = acc


@lru_cache(maxsize=None)
def _closed_loop_kernel(s, f0, f1, q, phi, Omega, P, S, n, r, d, qd, jit):
    oW, oZ, oE = P, P + S, P + S + n
    oXi = oE + r
    oTh = oXi + d
    oX = oTh + qd
    nX = (d - 1) * qd
    oK = 4
    oF = oK + d
    oG = oF + (d - 1) * (d - 1)
    oC = oG + (d - 1) * d

    def kernel(t, x, prm):
        k = prm[0]
        ell = prm[1]
        ymax = prm[2]
        sgn = prm[3]
        K = prm[oK:oF]
        F = prm[oF:oG]
        G = prm[oG:oC]
        cf = prm[oC : oC + r - 1]
        out = np.zeros(x.shape[0])
        rho = x[0:P]
        w = x[oW:oZ]
        z = x[oZ:oE]
        e = x[oE:oXi]
        xi = x[oXi:oTh]
        th = x[oTh:oX]
        Xf = x[oX : oX + nX]
        out[oW:oZ] = s(rho, w)
        e1 = e[0]
        if n > 0:
            out[oZ:oE] = f0(rho, w, z) + f1(rho, w, z, e1) * e1
        yt = e[r - 1]
        for i in range(r - 1):
            out[oE + i] = e[i + 1]
            yt += cf[i] * e[i]
        v = sgn * k * yt
        out[oE + r - 1] = q(rho, w, z, e) + xi[0] + v
        yc = saturate(xi[0], ymax)
        _regulator_block(out, oXi, xi, th, Xf, v, phi(yc), Omega(yc), K, F, G, ell, d, qd)
        return out

    return njit(nogil=True)(kernel) if jit else kernel


@lru_cache(maxsize=None)
def _regulator_zero_dynamics_kernel(s, f0, q, theta, phi, Omega, P, S, n, d, qd, jit):
    oW, oZ, oEta = P, P + S, P + S + n
    oTh = oEta + d
    oX = oTh + qd
    nX = (d - 1) * qd
    oK = 2
    oB = oK + d
    oF = oB + d
    oG = oF + (d - 1) * (d - 1)
    oEnd = oG + (d - 1) * d

    def kernel(t, x, prm):
        ell = prm[0]
        ymax = prm[1]
        K = prm[oK:oB]
        b = prm[oB:oF]
        F = prm[oF:oG]
        G = prm[oG:oEnd]
        out = np.zeros(x.shape[0])
        rho = x[0:P]
        w = x[oW:oZ]
        z = x[oZ:oEta]
        eta = x[oEta:oTh]
        tt = x[oTh:oX]
        Xf = x[oX : oX + nX]
        out[oW:oZ] = s(rho, w)
        if n > 0:
            out[oZ:oEta] = f0(rho, w, z)
        th = theta(rho)
        q0 = q(rho, w, z, np.zeros(1)) + eta[0]
        yc = saturate(eta[0], ymax)
        ph = phi(yc)
        Om = Omega(yc)
        beta = np.empty(qd)
        bt = 0.0
        for j in range(qd):
            beta[j] = Om[0, j] + (Xf[j] if d > 1 else 0.0)
            bt += beta[j] * tt[j]
        for i in range(d):
            acc = ph[i] - K[i] * q0 + b[i] * bt
            if i < d - 1:
                acc += eta[i + 1]
            for j in range(qd):
                acc += Om[i, j] * th[j]
            out[oEta + i] = acc
        for j in range(qd):
            out[oTh + j] = -beta[j] * q0 - deadzone_scalar(tt[j] + th[j], ell)
        m = d - 1
        for i in range(m):
            for j in range(qd):
                acc = 0.0
                for l in range(m):
                    acc += F[i * m + l] * Xf[l * qd + j]
                for l in range(d):
                    acc += G[i * d + l] * Om[l, j]
                out[oX + i * qd + j] = acc
        return out

    return njit(nogil=True)(kernel) if jit else kernel


@lru_cache(maxsize=None)
def _filter_kernel(s, f0, tau, Omega, P, S, n, d, qd, jit):
    """Zero dynamics driving the filter X_dot = F X + G Omega(tau_1)."""
    oW, oZ, oX = P, P + S, P + S + n
    m = d - 1
    oG = m * m

    def kernel(t, x, prm):
        out = np.zeros(x.shape[0])
        rho = x[0:P]
        w = x[oW:oZ]
        z = x[oZ:oX]
        out[oW:oZ] = s(rho, w)
        if n > 0:
            out[oZ:oX] = f0(rho, w, z)
        Om = Omega(tau(rho, w, z)[0])
        for i in range(m):
            for j in range(qd):
                acc = 0.0
                for l in range(m):
                    acc += prm[i * m + l] * x[oX + l * qd + j]
                for l in range(d):
                    acc += prm[oG + i * d + l] * Om[l, j]
                out[oX + i * qd + j] = acc
        return out

    return njit(nogil=True)(kernel) if jit else kernel


def _all_jitted(*fns) -> bool:
    return all(is_jitted(f) for f in fns)


def _labels(prefix, count):
    return [f"{prefix}_{i + 1}" for i in range(count)]


def _x_labels(d, qd):
    return [f"X_{i + 1}_{j + 1}" for i in range(d - 1) for j in range(qd)]


@dataclass(frozen=True)
class Layout:
    """Block slices of a closed-loop state vector."""

    blocks: dict
    output_index: int

    def __getitem__(self, name) -> slice:
        return self.blocks[name]

    @property
    def dim(self) -> int:
        return max(s.stop for s in self.blocks.values())


def _layout(P, S, n, r, d, qd, output_index=None) -> Layout:
    sizes = [("rho", P), ("w", S), ("z", n), ("e", r), ("xi", d), ("theta_hat", qd), ("X", (d - 1) * qd)]
    blocks, off = {}, 0
    for name, size in sizes:
        blocks[name] = slice(off, off + size)
        off += size
    return Layout(blocks, blocks["e"].start if output_index is None else output_index)


def _loop_plant(scenario: Scenario, coordinates: str):
    """Plant seen by the loop and the reduction coefficients fed to the controller."""
    plant = scenario.plant
    if plant.r == 1:
        return plant, np.zeros(0), None
    if scenario.reduction is None:
        raise ScenarioError(f"{scenario.name}: relative degree {plant.r} needs reduction parameters")
    if coordinates == "original":
        return plant, scenario.reduction.coeffs(), None
    if coordinates == "reduced":
        return reduce_plant(plant, scenario.reduction).plant, np.zeros(0), plant.n
    raise ValueError(f"unknown coordinates {coordinates!r}")


def closed_loop_layout(scenario: Scenario, coordinates: str = "original") -> Layout:
    plant, _, out_idx = _loop_plant(scenario, coordinates)
    exo, im = scenario.exo, scenario.immersion
    lay = _layout(exo.p, exo.s_dim, plant.n, plant.r, im.d, im.q_dim)
    if out_idx is not None:
        lay = Layout(lay.blocks, lay["z"].start + out_idx)
    return lay


def assemble_closed_loop(scenario: Scenario, coordinates: str = "original") -> VectorField:
    """Plant + exosystem + regulator with v = -k y_tilde.

    For r > 1 the ``original`` coordinates feed the regulator with
    e_tilde computed from (e_1..e_r); ``reduced`` coordinates simulate the
    relative-degree-one reduced plant instead.  The two are related by a
    fixed linear change of coordinates.
    """
    plant, cf, _ = _loop_plant(scenario, coordinates)
    exo, im, reg = scenario.exo, scenario.immersion, scenario.regulator
    d, qd = im.d, im.q_dim
    jit = _all_jitted(exo.s, plant.f0, plant.f1, plant.q, im.phi, im.Omega)
    kernel = _closed_loop_kernel(
        exo.s, plant.f0, plant.f1, plant.q, im.phi, im.Omega, exo.p, exo.s_dim, plant.n, plant.r, d, qd, jit
    )
    y_max = math.inf if im.y_max is None else im.y_max
    prm = np.concatenate(
        [[reg.k, reg.ell, y_max, scenario.stabilizer_sign], reg.K, reg.F.reshape(-1), reg.G.reshape(-1), cf]
    )
    labels = (
        _labels("rho", exo.p)
        + _labels("w", exo.s_dim)
        + _labels("z", plant.n)
        + _labels("e", plant.r)
        + _labels("xi", d)
        + _labels("theta_hat", qd)
        + _x_labels(d, qd)
    )
    return VectorField(len(labels), kernel=kernel, params=prm, labels=tuple(labels))


def initial_state(scenario: Scenario, coordinates: str = "original") -> np.ndarray:
    e0 = np.array(scenario.e0)
    z0 = np.array(scenario.z0)
    if scenario.plant.r > 1 and coordinates == "reduced":
        e_red = to_reduced_coordinates(scenario.reduction, e0)
        z0 = np.concatenate([z0, e_red[:-1]])
        e0 = e_red[-1:]
    return np.concatenate(
        [scenario.rho, scenario.w0, z0, e0, scenario.xi0, scenario.theta_hat0, scenario.X0]
    ).astype(float)


def original_to_reduced_map(scenario: Scenario) -> np.ndarray:
    """Matrix mapping an original-coordinate closed-loop state to reduced coordinates."""
    lay = closed_loop_layout(scenario, "original")
    dim = lay.dim
    Tm = np.eye(dim)
    if scenario.plant.r > 1:
        e = lay["e"]
        last = e.stop - 1
        Tm[last, e.start : last] = scenario.reduction.coeffs()
    return Tm


def assemble_regulator_zero_dynamics(scenario: Scenario) -> VectorField:
    """Zero dynamics of the closed loop in (rho, w, z, eta, theta_tilde, X).

    Relative-degree-r plants use the reduced plant.
    """
    plant = scenario.plant
    if plant.r > 1:
        plant = reduce_plant(plant, scenario.reduction).plant
    exo, im, reg = scenario.exo, scenario.immersion, scenario.regulator
    d, qd = im.d, im.q_dim
    jit = _all_jitted(exo.s, plant.f0, plant.q, im.theta, im.phi, im.Omega)
    kernel = _regulator_zero_dynamics_kernel(
        exo.s, plant.f0, plant.q, im.theta, im.phi, im.Omega, exo.p, exo.s_dim, plant.n, d, qd, jit
    )
    y_max = math.inf if im.y_max is None else im.y_max
    prm = np.concatenate([[reg.ell, y_max], reg.K, reg.b_vec, reg.F.reshape(-1), reg.G.reshape(-1)])
    labels = (
        _labels("rho", exo.p)
        + _labels("w", exo.s_dim)
        + _labels("z", plant.n)
        + _labels("eta", d)
        + _labels("theta_tilde", qd)
        + _x_labels(d, qd)
    )
    return VectorField(len(labels), kernel=kernel, params=prm, labels=tuple(labels))


def filter_field(plant: PlantNormalForm, exo: Exosystem, im: ImmersionData, params: RegulatorParams) -> VectorField:
    """Zero dynamics plus the filter X_dot = F X + G Omega(tau_1(z))."""
    d, qd = im.d, im.q_dim
    jit = _all_jitted(exo.s, plant.f0, im.tau, im.Omega)
    kernel = _filter_kernel(exo.s, plant.f0, im.tau, im.Omega, exo.p, exo.s_dim, plant.n, d, qd, jit)
    prm = np.concatenate([params.F.reshape(-1), params.G.reshape(-1)])
    labels = _labels("rho", exo.p) + _labels("w", exo.s_dim) + _labels("z", plant.n) + _x_labels(d, qd)
    return VectorField(len(labels), kernel=kernel, params=prm, labels=tuple(labels))


# ------------------------------------------------------------------ simulation


@dataclass(frozen=True)
class Metrics:
    sup_norm: dict
    terminal_error: float
    settling_time: Optional[float]
    theta_error: float
    deadzone_active_time: float
    late_growth: float
    bounded: bool
    regulated: bool

    def as_dict(self) -> dict:
        return {
            "sup_norm": dict(self.sup_norm),
            "terminal_error": self.terminal_error,
            "settling_time": self.settling_time,
            "theta_error": self.theta_error,
            "deadzone_active_time": self.deadzone_active_time,
            "late_growth": self.late_growth,
            "bounded": self.bounded,
            "regulated": self.regulated,
        }


@dataclass(frozen=True)
class SimResult:
    scenario_name: str
    trajectory: Trajectory
    layout: Layout
    coordinates: str
    metrics: Metrics
    diverged: bool = False
    divergence_time: Optional[float] = None

    def block(self, name: str) -> np.ndarray:
        return self.trajectory.states[:, self.layout[name]]

    @property
    def output(self) -> np.ndarray:
        """Regulated output e = e_1 along the run."""
        return self.trajectory.states[:, self.layout.output_index]


def compute_metrics(traj: Trajectory, layout: Layout, scenario: Scenario, diverged: bool = False) -> Metrics:
    states, times = traj.states, traj.times
    sup = {name: float(np.max(np.linalg.norm(states[:, sl], axis=1))) if sl.stop > sl.start else 0.0
           for name, sl in layout.blocks.items()}
    e = np.abs(states[:, layout.output_index])
    n = len(times)
    tail = max(1, int(math.ceil(scenario.terminal_fraction * n)))
    terminal = float(np.max(e[-tail:]))
    above = np.flatnonzero(e > scenario.tol_e)
    if above.size == 0:
        settling = float(times[0])
    elif above[-1] == n - 1:
        settling = None
    else:
        settling = float(times[above[-1] + 1])
    theta_hat = states[-1, layout["theta_hat"]]
    theta_err = float(np.linalg.norm(theta_hat - scenario.theta_true))
    active = np.any(np.abs(states[:, layout["theta_hat"]]) > scenario.regulator.ell, axis=1)
    dz_time = float(np.count_nonzero(active) * scenario.h)
    norms = np.linalg.norm(states, axis=1)
    half = n // 2
    if half >= 1:
        growth = float(norms[half:].max() / max(norms[:half].max(), 1e-300))
    else:
        growth = 1.0
    bounded = (not diverged) and bool(np.all(np.isfinite(norms))) and growth <= 1.01 + 1e-9
    regulated = bounded and terminal <= scenario.tol_e
    return Metrics(sup, terminal, settling, theta_err, dz_time, growth, bounded, regulated)


def simulate(scenario: Scenario, coordinates: str = "original") -> SimResult:
    """Integrate the closed loop over [0, T] and summarise it.

    A run whose state norm exceeds ``divergence_bound`` is returned with
    ``diverged=True`` and the trajectory up to the blow-up.
    """
    scenario.validate()
    field_ = assemble_closed_loop(scenario, coordinates)
    layout = closed_loop_layout(scenario, coordinates)
    x0 = initial_state(scenario, coordinates)
    diverged, t_div = False, None
    try:
        traj = integrate(field_, x0, 0.0, scenario.T, scenario.h, bound=scenario.divergence_bound)
    except DivergenceError as exc:
        traj, diverged, t_div = exc.trajectory, True, exc.t
    metrics = compute_metrics(traj, layout, scenario, diverged)
    return SimResult(scenario.name, traj, layout, coordinates, metrics, diverged, t_div)


@dataclass(frozen=True)
class Diagnostics:
    """Normal-form coordinates of a closed-loop run."""

    times: np.ndarray
    rho: np.ndarray
    w: np.ndarray
    z: np.ndarray
    eta: np.ndarray
    theta_tilde: np.ndarray
    X: np.ndarray
    x: np.ndarray
    tau: np.ndarray
    theta: np.ndarray

    def point(self, i: int) -> AugmentedPoint:
        return AugmentedPoint(self.rho[i], self.w[i], self.z[i])


def diagnostic_coordinates(sim: SimResult, scenario: Scenario) -> Diagnostics:
    """theta_tilde = theta_hat - theta(rho) - beta x,  eta = xi - M (theta_hat - theta(rho)) - K x.

    x is the loop output fed to the regulator (e, or e_tilde after reduction).
    tau is evaluated at the original (rho, w, z).
    """
    im, reg = scenario.immersion, scenario.regulator
    d, qd = im.d, im.q_dim
    S = sim.trajectory.states
    lay = sim.layout
    rho, w = S[:, lay["rho"]], S[:, lay["w"]]
    n0 = scenario.plant.n
    z_loop = S[:, lay["z"]]
    z = z_loop[:, :n0]
    e = S[:, lay["e"]]
    if scenario.plant.r > 1 and sim.coordinates == "original":
        x = to_reduced_coordinates(scenario.reduction, e)[:, -1]
    else:
        x = e[:, -1]
    xi = S[:, lay["xi"]]
    th_hat = S[:, lay["theta_hat"]]
    Xf = S[:, lay["X"]].reshape(-1, d - 1, qd)
    theta = scenario.theta_true
    y_max = math.inf if im.y_max is None else im.y_max
    N = S.shape[0]
    eta = np.empty((N, d))
    tt = np.empty((N, qd))
    tau = np.empty((N, d))
    for i in range(N):
        Om = np.asarray(im.Omega(saturate(xi[i, 0], y_max)), dtype=float).reshape(d, qd)
        beta = Om[0] + (Xf[i, 0] if d > 1 else 0.0)
        dth = th_hat[i] - theta
        tt[i] = dth - beta * x[i]
        Mdth = np.concatenate([[0.0], Xf[i] @ dth]) if d > 1 else np.zeros(1)
        eta[i] = xi[i] - Mdth - reg.K * x[i]
        tau[i] = im.tau(rho[i], w[i], z[i])
    return Diagnostics(sim.trajectory.times, rho, w, z, eta, tt, Xf.reshape(N, -1), x, tau, theta)
