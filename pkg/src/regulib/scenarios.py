"""Named example scenarios built around a harmonic exosystem with unknown frequency.

harmonic1
    w1' = rho w2, w2' = -rho w1 with rho in [0.8, 1.2]; plant z' = -z,
    e' = -w1 + z + u.  Friend control c = w1 - z, attractor {z = 0}.
    Immersion tau = (w1, rho w2), theta = rho^2, phi = 0, Omega(y) = col(0, -y).
    With b = (1, 2): F = -2, G = (-2, 1) and the filter steady state is
    sigma = (-2 w1 + rho w2) / (rho^2 + 4), so sigma(rho=1, w=(1, 0)) = -0.4.
    Over one period the excitation Gram is 0.1 * 2 pi / rho.

harmonic1-r2
    Same exosystem and zero dynamics with the input two integrators away
    (e1' = e2, e2' = -w1 + z + u).  Reduced with a_0 = 1; g is escalated.

no-pe
    harmonic1 with two copies of the same regressor column and
    theta = (rho^2 / 2, rho^2 / 2).  Only the sum of the estimates is
    identifiable, so the excitation Gram is singular.

harmonic1-wrong-sign
    harmonic1 with v = +k e, which can never pass a gain probe.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Callable

import numpy as np
from numba import njit

from .closed_loop import Scenario
from .plant import Ball, Box, Exosystem, ImmersionData, PlantNormalForm
from .reduction import ReductionParams
from .regulator import RegulatorParams

RHO_BOX = Box((0.8,), (1.2,))


@njit
def harmonic_s(rho, w):
    return np.array([rho[0] * w[1], -rho[0] * w[0]])


@njit
def stable_f0(rho, w, z):
    return -z


@njit
def zero_f1(rho, w, z, e1):
    return np.zeros(z.shape[0])


@njit
def harmonic_q(rho, w, z, e):
    return -w[0] + z[0]


@njit
def harmonic_tau(rho, w, z):
    return np.array([w[0], rho[0] * w[1]])


@njit
def harmonic_theta(rho):
    return np.array([rho[0] * rho[0]])


@njit
def zero_phi(y):
    return np.zeros(2)


@njit
def harmonic_Omega(y):
    out = np.zeros((2, 1))
    out[1, 0] = -y
    return out


@njit
def split_theta(rho):
    half = 0.5 * rho[0] * rho[0]
    return np.array([half, half])


@njit
def duplicated_Omega(y):
    out = np.zeros((2, 2))
    out[1, 0] = -y
    out[1, 1] = -y
    return out


def harmonic_exosystem() -> Exosystem:
    return Exosystem(p=1, s_dim=2, s=harmonic_s, param_box=RHO_BOX, W0=Ball((0.0, 0.0), 1.0))


def harmonic_plant(r: int = 1) -> PlantNormalForm:
    return PlantNormalForm(n=1, r=r, f0=stable_f0, f1=zero_f1, q=harmonic_q, Z0=Box((-2.0,), (2.0,)), c=1.0)


def harmonic_immersion() -> ImmersionData:
    return ImmersionData(d=2, q_dim=1, tau=harmonic_tau, theta=harmonic_theta, phi=zero_phi, Omega=harmonic_Omega)


@dataclass(frozen=True)
class NamedScenario:
    name: str
    description: str
    builder: Callable

    def build(self) -> Scenario:
        return self.builder()


def canonical_harmonic() -> Scenario:
    return Scenario(
        name="harmonic1",
        plant=harmonic_plant(),
        exo=harmonic_exosystem(),
        immersion=harmonic_immersion(),
        regulator=RegulatorParams(b=(1.0, 2.0), lam=5.0, k=20.0, ell=1.5),
        rho=(1.0,),
        w0=(1.0, 0.0),
        z0=(0.5,),
        e0=(0.5,),
        T=200.0,
        h=1e-3,
    )


def harmonic_phase(scenario: Scenario, rho: float, phase: float) -> Scenario:
    """Same scenario with frequency rho and w0 on the unit circle at angle ``phase``."""
    return replace(scenario, rho=(rho,), w0=(math.cos(phase), math.sin(phase)))


def harmonic_grid(rhos=(0.8, 0.9, 1.0, 1.1, 1.2), n_phase: int = 5, base: Scenario = None) -> list:
    base = canonical_harmonic() if base is None else base
    phases = [2.0 * math.pi * j / n_phase for j in range(n_phase)]
    return [harmonic_phase(base, rho, ph) for rho in rhos for ph in phases]


def _r2_template(g: float) -> Scenario:
    return replace(
        canonical_harmonic(),
        name="harmonic1-r2",
        plant=harmonic_plant(r=2),
        reduction=ReductionParams(a=(1.0,), g=g),
        e0=(0.5, 0.0),
    )


@lru_cache(maxsize=None)
def _escalated_g() -> float:
    from .analysis import small_gain_probe

    report = small_gain_probe(_r2_template(2.0), "g", max_doublings=6, floor=2.0)
    if report.passing_value is None:
        raise RuntimeError("no reduction gain up to 128 regulates harmonic1-r2")
    return report.passing_value


def canonical_harmonic_r2(g: float = None) -> Scenario:
    """Relative-degree-two variant; ``g=None`` escalates g from 2 by doubling."""
    return _r2_template(_escalated_g() if g is None else g)


def pe_negative_control() -> Scenario:
    im = ImmersionData(d=2, q_dim=2, tau=harmonic_tau, theta=split_theta, phi=zero_phi, Omega=duplicated_Omega)
    return replace(
        canonical_harmonic(),
        name="no-pe",
        immersion=im,
        regulator=RegulatorParams(b=(1.0, 2.0), lam=5.0, k=20.0, ell=1.0, q_dim=2),
        theta_hat0=(0.2, -0.2),
        X0=(0.0, 0.0),
    )


def wrong_sign_harmonic() -> Scenario:
    return replace(canonical_harmonic(), name="harmonic1-wrong-sign", stabilizer_sign=1.0)


REGISTRY = {
    ns.name: ns
    for ns in (
        NamedScenario("harmonic1", "harmonic exosystem, relative degree one", canonical_harmonic),
        NamedScenario("harmonic1-r2", "harmonic exosystem, relative degree two", canonical_harmonic_r2),
        NamedScenario("no-pe", "duplicated regressor, excitation fails", pe_negative_control),
        NamedScenario("harmonic1-wrong-sign", "destabilizing sign on the output feedback", wrong_sign_harmonic),
    )
}


def get_scenario(name: str) -> Scenario:
    try:
        return REGISTRY[name].build()
    except KeyError:
        raise KeyError(f"unknown scenario {name!r}; known: {', '.join(sorted(REGISTRY))}") from None
