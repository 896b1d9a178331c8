"""Fixed-step RK4 integration and small dense linear algebra.

Vector fields come in two flavours.  A plain field wraps a Python callable
``rhs(t, x)``.  A kernel field wraps ``kernel(t, x, p)`` together with a
parameter vector ``p``; when the kernel is a numba dispatcher the whole
integration loop is compiled, which is what makes long closed-loop runs
affordable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numba import njit
from numba.extending import is_jitted

from .errors import DivergenceError, IntegrationError, SynthesisError

HURWITZ_TOL = -1e-10

_EMPTY = np.zeros(0)


@dataclass(frozen=True)
class VectorField:
    """Autonomous or time-varying vector field on R^dim.

    Either ``rhs(t, x)`` or ``kernel(t, x, params)`` must be given.
    ``labels`` optionally names each state component.
    """

    dim: int
    rhs: Optional[Callable] = None
    kernel: Optional[Callable] = None
    params: np.ndarray = field(default_factory=lambda: _EMPTY)
    labels: Optional[tuple] = None

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be positive")
        if (self.rhs is None) == (self.kernel is None):
            raise ValueError("exactly one of rhs or kernel must be given")
        object.__setattr__(self, "params", np.ascontiguousarray(self.params, dtype=float))
        if self.labels is not None and len(self.labels) != self.dim:
            raise ValueError("labels must have one entry per state component")

    @property
    def compiled(self) -> bool:
        return self.kernel is not None and is_jitted(self.kernel)

    def __call__(self, t, x):
        x = np.asarray(x, dtype=float)
        if self.kernel is not None:
            out = self.kernel(float(t), x, self.params)
        else:
            out = self.rhs(t, x)
        out = np.asarray(out, dtype=float).reshape(-1)
        if out.shape[0] != self.dim:
            raise ValueError(f"vector field returned {out.shape[0]} components, expected {self.dim}")
        return out


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    labels: Optional[tuple] = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        states = np.asarray(self.states, dtype=float)
        if states.ndim != 2 or times.ndim != 1 or states.shape[0] != times.shape[0]:
            raise ValueError("times and states must have matching lengths")
        if times.size > 1 and not np.all(np.diff(times) > 0):
            raise ValueError("times must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "states", states)

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def __len__(self):
        return self.times.shape[0]


def _check_finite(t, k):
    bad = np.flatnonzero(~np.isfinite(k))
    if bad.size:
        raise IntegrationError(t, bad[0])


def rk4_step(field: VectorField, t: float, x, h: float) -> np.ndarray:
    """One classical Runge-Kutta step of size ``h``."""
    if not h > 0:
        raise ValueError("step size must be positive")
    x = np.asarray(x, dtype=float)
    if x.shape != (field.dim,):
        raise ValueError(f"state has shape {x.shape}, expected ({field.dim},)")
    k1 = field(t, x)
    _check_finite(t, k1)
    k2 = field(t + 0.5 * h, x + 0.5 * h * k1)
    _check_finite(t + 0.5 * h, k2)
    k3 = field(t + 0.5 * h, x + 0.5 * h * k2)
    _check_finite(t + 0.5 * h, k3)
    k4 = field(t + h, x + h * k3)
    _check_finite(t + h, k4)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


@njit(nogil=True)
def _first_bad(k):
    for i in range(k.shape[0]):
        if not np.isfinite(k[i]):
            return i
    return -1


@njit(nogil=True)
def _rk4_loop(kernel, p, x0, t0, h, n, bound):
    """Compiled RK4 loop.

    Returns (states, steps_done, status, index): status 0 ok, 1 non-finite
    derivative in component ``index``, 2 state norm above ``bound``.
    """
    dim = x0.shape[0]
    out = np.empty((n + 1, dim))
    out[0] = x0
    x = x0.copy()
    half = 0.5 * h
    for i in range(n):
        t = t0 + i * h
        k1 = kernel(t, x, p)
        j = _first_bad(k1)
        if j >= 0:
            return out, i, 1, j
        k2 = kernel(t + half, x + half * k1, p)
        j = _first_bad(k2)
        if j >= 0:
            return out, i, 1, j
        k3 = kernel(t + half, x + half * k2, p)
        j = _first_bad(k3)
        if j >= 0:
            return out, i, 1, j
        k4 = kernel(t + h, x + h * k3, p)
        j = _first_bad(k4)
        if j >= 0:
            return out, i, 1, j
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[i + 1] = x
        if np.sqrt(np.sum(x * x)) > bound:
            return out, i + 1, 2, -1
    return out, n, 0, -1


def grid_steps(t0: float, t1: float, h: float) -> int:
    """Number of uniform steps so that t0 + n*h >= t1 (up to rounding)."""
    return int(math.ceil((t1 - t0) / h - 1e-9))


def integrate(
    field: VectorField,
    x0,
    t0: float,
    t1: float,
    h: float,
    bound: float = math.inf,
) -> Trajectory:
    """Integrate ``field`` on the uniform grid t0, t0+h, ... up to t1.

    Raises IntegrationError on a non-finite derivative and DivergenceError
    when the state norm exceeds ``bound``; the latter carries the trajectory
    computed so far.
    """
    if not t1 > t0:
        raise ValueError("t1 must exceed t0")
    if not h > 0:
        raise ValueError("step size must be positive")
    x0 = np.array(x0, dtype=float).reshape(-1)
    if x0.shape[0] != field.dim:
        raise ValueError(f"initial state has {x0.shape[0]} components, expected {field.dim}")
    n = grid_steps(t0, t1, h)
    times = t0 + h * np.arange(n + 1)

    if field.compiled:
        states, done, status, idx = _rk4_loop(field.kernel, field.params, x0, float(t0), float(h), n, float(bound))
        if status == 1:
            raise IntegrationError(times[done], idx)
    else:
        states = np.empty((n + 1, field.dim))
        states[0] = x0
        x = x0
        status, done = 0, n
        for i in range(n):
            x = rk4_step(field, times[i], x, h)
            states[i + 1] = x
            if np.linalg.norm(x) > bound:
                status, done = 2, i + 1
                break

    if status == 2:
        partial = Trajectory(times[: done + 1], states[: done + 1].copy(), field.labels)
        raise DivergenceError(times[done], np.linalg.norm(states[done]), partial)
    return Trajectory(times, states, field.labels)


def hurwitz_check(F, what: str = "matrix") -> np.ndarray:
    """Return eigenvalues of F; raise SynthesisError if any has real part >= -1e-10."""
    F = np.atleast_2d(np.asarray(F, dtype=float))
    if F.size == 0:
        return np.zeros(0, dtype=complex)
    eig = np.linalg.eigvals(F)
    worst = eig[np.argmax(eig.real)]
    if worst.real >= HURWITZ_TOL:
        raise SynthesisError(f"{what} is not Hurwitz: eigenvalue {worst:.6g}")
    return eig


def solve_lyapunov(F) -> np.ndarray:
    """Symmetric positive-definite P with P F + F^T P = -I.

    Solves the Kronecker-vectorised linear system directly, followed by one
    step of iterative refinement.
    """
    F = np.atleast_2d(np.asarray(F, dtype=float))
    if F.shape[0] != F.shape[1]:
        raise ValueError("F must be square")
    hurwitz_check(F, "F")
    n = F.shape[0]
    eye = np.eye(n)
    # Row-major vec: vec(P F) = (I kron F^T) vec(P), vec(F^T P) = (F^T kron I) vec(P)
    L = np.kron(eye, F.T) + np.kron(F.T, eye)
    rhs = -eye.reshape(-1)
    p = np.linalg.solve(L, rhs)
    p += np.linalg.solve(L, rhs - L @ p)
    P = p.reshape(n, n)
    return 0.5 * (P + P.T)


def eig_min_symmetric(S, tol: float = 1e-10) -> float:
    S = np.atleast_2d(np.asarray(S, dtype=float))
    if S.shape[0] != S.shape[1]:
        raise ValueError("S must be square")
    if S.size and np.max(np.abs(S - S.T)) > tol:
        raise ValueError("matrix is not symmetric within tolerance")
    if S.size == 0:
        return math.inf
    return float(np.linalg.eigvalsh(0.5 * (S + S.T))[0])


def poly_roots_hurwitz(coeffs_high_first: Sequence[float], distinct_gap: Optional[float] = None, what="polynomial"):
    """Roots of a monic polynomial, checked for negative real parts (and distinctness)."""
    roots = np.roots(np.asarray(coeffs_high_first, dtype=float)) if len(coeffs_high_first) > 1 else np.zeros(0)
    if roots.size and np.max(roots.real) >= HURWITZ_TOL:
        raise SynthesisError(f"{what} is not Hurwitz; roots {np.round(roots, 6).tolist()}")
    if distinct_gap is not None and roots.size > 1:
        gaps = np.abs(roots[:, None] - roots[None, :])[np.triu_indices(roots.size, 1)]
        if gaps.min() <= distinct_gap:
            raise SynthesisError(f"{what} has repeated roots {np.round(roots, 6).tolist()}")
    return roots
