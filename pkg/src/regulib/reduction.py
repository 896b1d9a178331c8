"""Reduction of a relative-degree-r plant to relative degree one.

The last output derivative is replaced by

    e_tilde = e_r + g^(r-1) a_0 e_1 + g^(r-2) a_1 e_2 + ... + g a_(r-2) e_(r-1)

and (z, e_1..e_(r-1)) become the internal state of a relative-degree-one
plant.  Any controller solving the regulation problem for the reduced plant
is lifted to the original one by feeding it e_tilde instead of its output.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numba import njit
from numba.extending import is_jitted

from .errors import SynthesisError
from .ode import poly_roots_hurwitz
from .plant import Box, PlantNormalForm


def hurwitz_coeffs(roots) -> np.ndarray:
    """Coefficients a_0..a_(m-1) of the monic polynomial with the given negative roots."""
    roots = np.atleast_1d(np.asarray(roots, dtype=float))
    if roots.size == 0:
        return np.zeros(0)
    if np.any(roots >= 0):
        raise ValueError(f"all roots must be negative, got {roots.tolist()}")
    return np.poly(roots)[1:][::-1].copy()


@dataclass(frozen=True)
class ReductionParams:
    a: tuple
    g: float

    def __post_init__(self):
        a = tuple(float(v) for v in np.atleast_1d(np.asarray(self.a, dtype=float)))
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "g", float(self.g))
        if not self.g > 1.0:
            raise SynthesisError(f"reduction gain g must exceed 1, got {self.g}")
        poly_roots_hurwitz([1.0, *a[::-1]], what="reduction polynomial")

    @property
    def r(self) -> int:
        return len(self.a) + 1

    def coeffs(self) -> np.ndarray:
        """Weights g^(r-1-i) a_i multiplying e_(i+1), i = 0..r-2."""
        m = len(self.a)
        return np.array([self.g ** (m - i) * self.a[i] for i in range(m)])

    @classmethod
    def from_roots(cls, roots, g: float) -> "ReductionParams":
        return cls(tuple(hurwitz_coeffs(roots)), g)


def tilde_e(params: ReductionParams, e) -> float:
    e = np.atleast_1d(np.asarray(e, dtype=float))
    if e.shape[0] != params.r:
        raise ValueError(f"expected {params.r} output components, got {e.shape[0]}")
    return float(e[-1] + params.coeffs() @ e[:-1])


def to_reduced_coordinates(params: ReductionParams, e) -> np.ndarray:
    """(e_1..e_r) -> (e_1..e_(r-1), e_tilde)."""
    e = np.asarray(e, dtype=float)
    out = e.copy()
    out[..., -1] = e[..., -1] + e[..., :-1] @ params.coeffs()
    return out


def from_reduced_coordinates(params: ReductionParams, e_red) -> np.ndarray:
    e_red = np.asarray(e_red, dtype=float)
    out = e_red.copy()
    out[..., -1] = e_red[..., -1] - e_red[..., :-1] @ params.coeffs()
    return out


@dataclass(frozen=True)
class ReducedPlant:
    plant: PlantNormalForm
    original: PlantNormalForm
    params: ReductionParams
    tilde_c_bound: float
    tilde_q: Callable = field(repr=False)


def _reduced_maps(f0, f1, q, n, r, coeffs, jit):
    m = r - 1
    cf = coeffs.copy()
    wrap = njit if jit else (lambda fn: fn)

    @wrap
    def f0_t(rho, w, zt):
        out = np.zeros(n + m)
        z = zt[0:n]
        e = zt[n : n + m]
        if n > 0:
            out[0:n] = f0(rho, w, z) + f1(rho, w, z, e[0]) * e[0]
        for i in range(m - 1):
            out[n + i] = e[i + 1]
        acc = 0.0
        for i in range(m):
            acc += cf[i] * e[i]
        out[n + m - 1] = -acc
        return out

    @wrap
    def f1_t(rho, w, zt, et):
        out = np.zeros(n + m)
        out[n + m - 1] = 1.0
        return out

    @wrap
    def q_t(rho, w, zt, et):
        # d/dt e_tilde = q + u + sum_i cf_i e_(i+2), with e_r recovered from e_tilde
        z = zt[0:n]
        e = np.empty(r)
        acc = 0.0
        for i in range(m):
            e[i] = zt[n + i]
            acc += cf[i] * e[i]
        e[r - 1] = et[0] - acc
        drift = 0.0
        for i in range(m):
            drift += cf[i] * e[i + 1]
        return q(rho, w, z, e) + drift

    return f0_t, f1_t, q_t


def reduce_plant(plant: PlantNormalForm, params: ReductionParams) -> ReducedPlant:
    if plant.r == 1:
        raise ValueError("plant already has relative degree one")
    if params.r != plant.r:
        raise ValueError(f"reduction parameters are for r={params.r}, plant has r={plant.r}")
    jit = all(is_jitted(f) for f in (plant.f0, plant.f1, plant.q))
    f0_t, f1_t, q_t = _reduced_maps(plant.f0, plant.f1, plant.q, plant.n, plant.r, params.coeffs(), jit)
    inflation = 1.0 + float(np.sum(params.coeffs()))
    Z0 = plant.Z0
    Ze = Box.symmetric(plant.c, plant.r - 1)
    Zt = _ProductSet(Z0, Ze)
    reduced = PlantNormalForm(n=plant.n + plant.r - 1, r=1, f0=f0_t, f1=f1_t, q=q_t, Z0=Zt, c=inflation * plant.c)
    return ReducedPlant(reduced, plant, params, inflation * plant.c, q_t)


@dataclass(frozen=True)
class _ProductSet:
    first: object
    second: object

    @property
    def dim(self):
        return self.first.dim + self.second.dim

    def contains(self, x, tol=1e-12):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return self.first.contains(x[: self.first.dim], tol) and self.second.contains(x[self.first.dim :], tol)

    def sample(self, rng, n):
        a = self.first.sample(rng, n) if self.first.dim else np.zeros((n, 0))
        return np.hstack([a, self.second.sample(rng, n)])


@dataclass(frozen=True)
class Controller:
    """Dynamic output feedback zeta_dot = rhs(zeta, y), u = output(zeta, y)."""

    dim: int
    rhs: Callable
    output: Callable


def lift_controller(controller: Controller, params: ReductionParams) -> Controller:
    """Drive ``controller`` with e_tilde computed from the full output y = (e_1..e_r)."""

    def rhs(zeta, y):
        return controller.rhs(zeta, tilde_e(params, y))

    def output(zeta, y):
        return controller.output(zeta, tilde_e(params, y))

    return Controller(controller.dim, rhs, output)
