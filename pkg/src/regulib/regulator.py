"""Adaptive internal-model regulator.

    u          = xi_1 + v
    xi_dot     = A xi + phi(xi_1) + Omega(xi_1) theta_hat + H(X, xi_1) v - M(X) dzv(theta_hat)
    theta_hat' = beta(X, xi_1) v - dzv(theta_hat)
    X_dot      = F X + G Omega(xi_1)

with M(X) = col(0, X), beta^T = C A M(X) + C Omega(xi_1), H = M beta + K and
K = A b + lambda b.  The stabilizing input is v = -k e.

For q > 1 parameters beta is a q-vector and M beta a d-vector, so H v stays
well shaped for scalar v.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import EvaluationError, SynthesisError
from .ode import poly_roots_hurwitz
from .plant import Box, ImmersionData, canonical_pair

ROOT_GAP = 1e-6
ELL_MARGIN = 1.05


@njit(nogil=True)
def deadzone_scalar(x, ell):
    """C^1 odd dead zone: 0 on [-ell, ell], identity outside [-ell-1, ell+1].

    The transition is the cubic Hermite blend with endpoint values/slopes
    (0, 0) and (ell + 1, 1), which is monotone for ell >= 0.
    """
    a = abs(x)
    if a <= ell:
        return 0.0
    if a >= ell + 1.0:
        return x
    s = a - ell
    val = (3.0 * s * s - 2.0 * s * s * s) * (ell + 1.0) + s * s * s - s * s
    return val if x > 0 else -val


@njit(nogil=True)
def _dzv_into(out, v, ell):
    for i in range(v.shape[0]):
        out[i] = deadzone_scalar(v[i], ell)


def deadzone_vec(v, ell) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    a = np.abs(v)
    s = np.clip(a - ell, 0.0, 1.0)
    blend = np.sign(v) * ((3.0 * s**2 - 2.0 * s**3) * (ell + 1.0) + s**3 - s**2)
    return np.where(a <= ell, 0.0, np.where(a >= ell + 1.0, v, blend))


@njit(nogil=True)
def saturate(y, y_max):
    """C^1 clamp: identity on |y| <= y_max - 1/2, constant y_max beyond y_max + 1/2."""
    a = abs(y)
    lo = y_max - 0.5
    if a <= lo:
        return y
    if a >= y_max + 0.5:
        return y_max if y > 0 else -y_max
    s = a - lo
    val = lo + s - 0.5 * s * s
    return val if y > 0 else -val


def build_fg(b):
    """Filter matrices F ((d-1)x(d-1)) and G ((d-1)xd) from b = col(1, b_2..b_d)."""
    b = np.asarray(b, dtype=float).reshape(-1)
    if b.size < 1 or b[0] != 1.0:
        raise SynthesisError("b must have leading entry 1")
    d = b.size
    poly_roots_hurwitz(b, distinct_gap=ROOT_GAP, what="filter polynomial")
    F = np.zeros((d - 1, d - 1))
    G = np.zeros((d - 1, d))
    if d > 1:
        F[:, 0] = -b[1:]
        F[:, 1:] = np.eye(d - 1, d - 2)
        G[:, 0] = -b[1:]
        G[:, 1:] = np.eye(d - 1)
    return F, G


def gain_K(b, lam: float, A=None) -> np.ndarray:
    if not lam > 0:
        raise ValueError("lambda must be positive")
    b = np.asarray(b, dtype=float).reshape(-1)
    if A is None:
        A = canonical_pair(b.size)[0]
    return A @ b + lam * b


def b_from_roots(roots) -> np.ndarray:
    """b = col(1, b_2..b_d) whose polynomial has the given roots."""
    roots = np.atleast_1d(np.asarray(roots, dtype=float))
    return np.real(np.poly(roots)) if roots.size else np.ones(1)


@dataclass(frozen=True)
class RegulatorParams:
    b: tuple
    lam: float
    k: float
    ell: float
    q_dim: int = 1
    F: np.ndarray = field(init=False, repr=False, compare=False)
    G: np.ndarray = field(init=False, repr=False, compare=False)
    K: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "b", tuple(float(v) for v in np.atleast_1d(self.b)))
        object.__setattr__(self, "lam", float(self.lam))
        object.__setattr__(self, "k", float(self.k))
        object.__setattr__(self, "ell", float(self.ell))
        if not self.lam > 0:
            raise SynthesisError(f"lambda must be positive, got {self.lam}")
        if not self.k >= 0:
            raise SynthesisError(f"k must be nonnegative, got {self.k}")
        if not self.ell > 0:
            raise SynthesisError(f"dead-zone amplitude must be positive, got {self.ell}")
        F, G = build_fg(self.b)
        object.__setattr__(self, "F", F)
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "K", gain_K(self.b, self.lam))

    @property
    def d(self) -> int:
        return len(self.b)

    @property
    def b_vec(self) -> np.ndarray:
        return np.array(self.b)

    def check_deadzone(self, im: ImmersionData, box: Box) -> float:
        """Raise unless ell exceeds the sampled max of |theta| over the box; return that max."""
        tmax = im.theta_max(box)
        if not self.ell > tmax:
            raise SynthesisError(f"dead-zone amplitude {self.ell} does not exceed max |theta| = {tmax:.6g}")
        return tmax


def synthesize(im: ImmersionData, box: Box, lam: float, k: float, roots=None, ell=None) -> RegulatorParams:
    """Regulator parameters with default roots -1..-(d-1) and ell = 1.05 max|theta|."""
    if roots is None:
        roots = -np.arange(1.0, im.d)
    b = b_from_roots(roots)
    if len(b) != im.d:
        raise SynthesisError(f"need {im.d - 1} roots for d={im.d}")
    if ell is None:
        ell = ELL_MARGIN * im.theta_max(box)
    params = RegulatorParams(tuple(b), lam, k, ell, im.q_dim)
    params.check_deadzone(im, box)
    return params


@dataclass(frozen=True)
class RegulatorState:
    xi: np.ndarray
    theta_hat: np.ndarray
    X: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "xi", np.atleast_1d(np.asarray(self.xi, dtype=float)))
        object.__setattr__(self, "theta_hat", np.atleast_1d(np.asarray(self.theta_hat, dtype=float)))
        X = np.asarray(self.X, dtype=float)
        object.__setattr__(self, "X", X.reshape(self.xi.size - 1, self.theta_hat.size))

    def pack(self) -> np.ndarray:
        return np.concatenate([self.xi, self.theta_hat, self.X.reshape(-1)])

    @classmethod
    def unpack(cls, v, d: int, q_dim: int) -> "RegulatorState":
        v = np.asarray(v, dtype=float)
        return cls(v[:d], v[d : d + q_dim], v[d + q_dim :].reshape(d - 1, q_dim))

    @classmethod
    def zeros(cls, d: int, q_dim: int) -> "RegulatorState":
        return cls(np.zeros(d), np.zeros(q_dim), np.zeros((d - 1, q_dim)))


def M_of(X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return np.vstack([np.zeros((1, X.shape[1])), X])


def _Omega(im, y):
    out = np.asarray(im.Omega(y), dtype=float).reshape(im.d, im.q_dim)
    if not np.all(np.isfinite(out)):
        raise EvaluationError("Omega returned a non-finite value")
    return out


def beta(X, xi1: float, im: ImmersionData) -> np.ndarray:
    """beta = [C A M(X) + C Omega(xi1)]^T; C A M(X) is the first row of X."""
    X = np.asarray(X, dtype=float).reshape(im.d - 1, im.q_dim)
    row = X[0] if im.d > 1 else np.zeros(im.q_dim)
    return row + _Omega(im, xi1)[0]


def bigH(X, xi1: float, params: RegulatorParams, im: ImmersionData) -> np.ndarray:
    X = np.asarray(X, dtype=float).reshape(im.d - 1, im.q_dim)
    return M_of(X) @ beta(X, xi1, im) + params.K


def regulator_rhs(state: RegulatorState, y: float, v: float, params: RegulatorParams, im: ImmersionData) -> RegulatorState:
    """Time derivative of the regulator state.

    ``y`` is accepted for interface symmetry only: the measurement enters
    through ``v``, computed upstream as -k y.
    """
    xi1 = float(state.xi[0])
    yc = saturate(xi1, im.y_max) if im.y_max is not None else xi1
    phi = np.asarray(im.phi(yc), dtype=float)
    Om = _Omega(im, yc)
    if not np.all(np.isfinite(phi)):
        raise EvaluationError("phi returned a non-finite value")
    dz = deadzone_vec(state.theta_hat, params.ell)
    M = M_of(state.X)
    bt = state.X[0] + Om[0] if im.d > 1 else Om[0]
    H = M @ bt + params.K
    dxi = im.A @ state.xi + phi + Om @ state.theta_hat + H * v - M @ dz
    dth = bt * v - dz
    dX = params.F @ state.X + params.G @ Om
    return RegulatorState(dxi, dth, dX)


def control_output(state: RegulatorState, e: float, params: RegulatorParams):
    """(u, v) with v = -k e and u = xi_1 + v."""
    v = -params.k * float(e)
    return float(state.xi[0]) + v, v


@dataclass(frozen=True)
class MatoReport:
    similarity: float
    input_vector: float
    output_vector: float
    tol: float = 1e-12

    @property
    def passed(self) -> bool:
        return max(self.similarity, self.input_vector, self.output_vector) <= self.tol

    @property
    def failures(self) -> list:
        names = {"T(A-KC)T^-1": self.similarity, "Tb": self.input_vector, "CT^-1": self.output_vector}
        return [k for k, v in names.items() if v > self.tol]

    def as_dict(self) -> dict:
        return {
            "similarity_dev": self.similarity,
            "input_vector_dev": self.input_vector,
            "output_vector_dev": self.output_vector,
            "tol": self.tol,
            "passed": self.passed,
        }


def verify_mato_transform(params: RegulatorParams, tol: float = 1e-12) -> MatoReport:
    """Check the block-triangular similarity produced by the choice K = A b + lambda b.

    With T = [[1, 0], [b_hat, I]], b_hat = -col(b_2..b_d):
    T (A - K C) T^-1 = [[-lambda, c_hat], [0, F]],  T b = e_1,  C T^-1 = C.
    """
    d = params.d
    A, C = canonical_pair(d)
    b = params.b_vec
    bhat = -b[1:]
    T = np.eye(d)
    T[1:, 0] = bhat
    Tinv = np.eye(d)
    Tinv[1:, 0] = -bhat
    target = np.zeros((d, d))
    target[0, 0] = -params.lam
    if d > 1:
        target[0, 1] = 1.0
        target[1:, 1:] = params.F
    sim = T @ (A - np.outer(params.K, C[0])) @ Tinv
    e1 = np.eye(d)[0]
    return MatoReport(
        similarity=float(np.max(np.abs(sim - target))),
        input_vector=float(np.max(np.abs(T @ b - e1))),
        output_vector=float(np.max(np.abs(C @ Tinv - C))),
        tol=tol,
    )
