"""Plant normal form, exosystem, immersion data and their residual checks.

Model maps follow one calling convention (all vectors are 1-D float arrays):

    s(rho, w)           -> w_dot,   shape (s_dim,)
    f0(rho, w, z)       -> z_dot,   shape (n,)
    f1(rho, w, z, e1)   -> shape (n,)   (multiplies the scalar e1)
    q(rho, w, z, e)     -> float        (e has length r)
    tau(rho, w, z)      -> shape (d,)
    theta(rho)          -> shape (q,)
    phi(y)              -> shape (d,)
    Omega(y)            -> shape (d, q)

Maps decorated with ``numba.njit`` let the simulators compile the closed loop.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional

import numpy as np
from numba import njit
from numba.extending import is_jitted

from .errors import AssumptionViolation, AssumptionWarning, DivergenceError, EvaluationError
from .ode import VectorField, integrate


@dataclass(frozen=True)
class Box:
    """Closed axis-aligned box, used for parameter ranges and initial sets."""

    lower: tuple
    upper: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lower))
        hi = tuple(float(v) for v in np.atleast_1d(self.upper))
        if len(lo) != len(hi) or not lo:
            raise ValueError("box bounds must be nonempty and of equal length")
        if any(not (math.isfinite(a) and math.isfinite(b) and a <= b) for a, b in zip(lo, hi)):
            raise ValueError("box must be bounded with lower <= upper")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return len(self.lower)

    def contains(self, x, tol: float = 1e-12) -> bool:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return bool(np.all(x >= np.array(self.lower) - tol) and np.all(x <= np.array(self.upper) + tol))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.lower, self.upper, size=(n, self.dim))

    def vertices(self) -> np.ndarray:
        corners = np.array(np.meshgrid(*zip(self.lower, self.upper), indexing="ij"))
        return corners.reshape(self.dim, -1).T

    def grid(self, m: int) -> np.ndarray:
        axes = [np.linspace(a, b, m) for a, b in zip(self.lower, self.upper)]
        return np.array(np.meshgrid(*axes, indexing="ij")).reshape(self.dim, -1).T

    @classmethod
    def symmetric(cls, bound: float, dim: int) -> "Box":
        return cls((-bound,) * dim, (bound,) * dim)


@dataclass(frozen=True)
class Ball:
    """Closed Euclidean ball."""

    center: tuple
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(v) for v in np.atleast_1d(self.center)))
        if not self.radius >= 0:
            raise ValueError("radius must be nonnegative")

    @property
    def dim(self) -> int:
        return len(self.center)

    def contains(self, x, tol: float = 1e-12) -> bool:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return bool(np.linalg.norm(x - np.array(self.center)) <= self.radius + tol)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        g = rng.standard_normal((n, self.dim))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        r = self.radius * rng.uniform(0.0, 1.0, size=(n, 1)) ** (1.0 / self.dim)
        return np.array(self.center) + r * g


@dataclass(frozen=True)
class Exosystem:
    p: int
    s_dim: int
    s: Callable
    param_box: Box
    W0: object

    def __post_init__(self):
        if self.param_box.dim != self.p:
            raise ValueError("parameter box dimension must equal p")
        if self.W0.dim != self.s_dim:
            raise ValueError("initial set dimension must equal s_dim")


@dataclass(frozen=True)
class PlantNormalForm:
    n: int
    r: int
    f0: Callable
    f1: Callable
    q: Callable
    Z0: object
    c: float = 1.0

    def __post_init__(self):
        if self.r < 1:
            raise ValueError("relative degree must be at least 1")
        if self.n < 0:
            raise ValueError("n must be nonnegative")
        if self.Z0.dim != self.n:
            raise ValueError("Z0 dimension must equal n")

    @property
    def E0(self) -> Box:
        return Box.symmetric(self.c, self.r)


def canonical_pair(d: int):
    """Upper-shift A and selector C = e1^T."""
    return np.eye(d, k=1), np.eye(1, d)


@dataclass(frozen=True)
class ImmersionData:
    d: int
    q_dim: int
    tau: Callable
    theta: Callable
    phi: Callable
    Omega: Callable
    y_max: Optional[float] = 10.0
    A: np.ndarray = field(init=False, repr=False, compare=False)
    C: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.d < 1 or self.q_dim < 1:
            raise ValueError("d and q_dim must be positive")
        A, C = canonical_pair(self.d)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "C", C)

    def theta_max(self, box: Box, m: int = 21) -> float:
        """max over the parameter box of |theta|_inf, sampled on a grid plus vertices."""
        pts = np.vstack([box.grid(m), box.vertices()])
        return max(float(np.max(np.abs(np.asarray(self.theta(r), dtype=float)))) for r in pts)


@dataclass(frozen=True)
class AugmentedPoint:
    rho: np.ndarray
    w: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        for name in ("rho", "w", "z"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)).copy())

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.rho, self.w, self.z])

    @classmethod
    def from_vector(cls, v, p: int, s_dim: int) -> "AugmentedPoint":
        v = np.asarray(v, dtype=float)
        return cls(v[:p], v[p : p + s_dim], v[p + s_dim :])


def _finite(value, what):
    arr = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise EvaluationError(f"{what} returned a non-finite value")
    return arr


def friend_control(plant: PlantNormalForm, pt: AugmentedPoint) -> float:
    """Input holding e at zero: -q evaluated with all e-components zero."""
    q = plant.q(pt.rho, pt.w, pt.z, np.zeros(plant.r))
    return -float(_finite(q, "q"))


@lru_cache(maxsize=None)
def _zero_dynamics_kernel(s, f0, p, s_dim, n, jit):
    def kernel(t, x, prm):
        out = np.zeros(x.shape[0])
        rho = x[0:p]
        w = x[p : p + s_dim]
        z = x[p + s_dim : p + s_dim + n]
        out[p : p + s_dim] = s(rho, w)
        if n > 0:
            out[p + s_dim : p + s_dim + n] = f0(rho, w, z)
        return out

    return njit(kernel) if jit else kernel


def zero_dynamics_field(plant: PlantNormalForm, exo: Exosystem) -> VectorField:
    """Augmented zero dynamics: rho_dot = 0, w_dot = s, z_dot = f0."""
    jit = is_jitted(exo.s) and is_jitted(plant.f0)
    kernel = _zero_dynamics_kernel(exo.s, plant.f0, exo.p, exo.s_dim, plant.n, jit)
    labels = tuple(
        [f"rho_{i + 1}" for i in range(exo.p)]
        + [f"w_{i + 1}" for i in range(exo.s_dim)]
        + [f"z_{i + 1}" for i in range(plant.n)]
    )
    return VectorField(exo.p + exo.s_dim + plant.n, kernel=kernel, labels=labels)


def immersion_residual(
    im: ImmersionData,
    plant: PlantNormalForm,
    exo: Exosystem,
    pt: AugmentedPoint,
    fd_step: float = 1e-5,
):
    """Residuals of the immersion identities at ``pt``.

    The time derivative of tau along the zero dynamics is approximated by a
    central difference in the direction of the flow.  Returns
    ``(res_ode, res_out)``.
    """
    if not fd_step > 0:
        raise ValueError("fd_step must be positive")
    field_ = zero_dynamics_field(plant, exo)
    x = pt.as_vector()
    v = field_(0.0, x)
    p, s_dim = exo.p, exo.s_dim

    def tau_at(vec):
        q = AugmentedPoint.from_vector(vec, p, s_dim)
        return _finite(im.tau(q.rho, q.w, q.z), "tau")

    dtau = (tau_at(x + fd_step * v) - tau_at(x - fd_step * v)) / (2.0 * fd_step)
    tau = tau_at(x)
    y = float(tau[0])
    model = im.A @ tau + _finite(im.phi(y), "phi") + _finite(im.Omega(y), "Omega") @ _finite(im.theta(pt.rho), "theta")
    res_ode = dtau - model
    res_out = friend_control(plant, pt) - y
    return res_ode, res_out


def attractor_sample(
    plant: PlantNormalForm,
    exo: Exosystem,
    n_init: int,
    t_burn: float,
    h: float = 1e-3,
    seed: int = 0,
    bound: float = 1e6,
) -> list:
    """Approximate points of the zero-dynamics attractor.

    Integrates the zero dynamics from ``n_init`` random initial points
    (parameter box x W0 x Z0) for ``t_burn`` and returns the endpoints.
    """
    if n_init < 0:
        raise ValueError("n_init must be nonnegative")
    if n_init == 0:
        return []
    if not t_burn > 0:
        raise ValueError("t_burn must be positive")
    rng = np.random.default_rng(seed)
    rhos = exo.param_box.sample(rng, n_init)
    ws = exo.W0.sample(rng, n_init)
    zs = plant.Z0.sample(rng, n_init) if plant.n else np.zeros((n_init, 0))
    field_ = zero_dynamics_field(plant, exo)
    points = []
    for rho, w, z in zip(rhos, ws, zs):
        x0 = np.concatenate([rho, w, z])
        try:
            traj = integrate(field_, x0, 0.0, t_burn, h, bound=bound)
        except DivergenceError as exc:
            raise AssumptionViolation(
                f"zero dynamics diverged at t={exc.t:.4g} from initial point {x0.tolist()}",
                initial_point=x0,
            ) from exc
        points.append(AugmentedPoint.from_vector(traj.final, exo.p, exo.s_dim))
    return points


def orbit_bounded(plant: PlantNormalForm, exo: Exosystem, pts: list, horizon: float, h: float = 1e-3, growth_tol: float = 0.01) -> bool:
    """Spot check: orbits from ``pts`` show no late growth over ``horizon``.

    Emits an AssumptionWarning and returns False when the sup over the second
    half exceeds the sup over the first half by more than ``growth_tol``.
    """
    field_ = zero_dynamics_field(plant, exo)
    for pt in pts:
        traj = integrate(field_, pt.as_vector(), 0.0, horizon, h)
        norms = np.linalg.norm(traj.states, axis=1)
        half = norms.size // 2
        if norms[half:].max() > (1.0 + growth_tol) * norms[:half].max() + 1e-12:
            warnings.warn(f"zero-dynamics orbit from {pt.as_vector().tolist()} keeps growing", AssumptionWarning)
            return False
    return True
