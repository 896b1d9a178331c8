"""Run configuration: YAML documents validated with pydantic, plus ``key=value`` overrides."""
from __future__ import annotations

import inspect
import math
from dataclasses import replace
from pathlib import Path
from typing import List, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, ValidationError

from .closed_loop import Scenario
from .errors import ConfigError
from .reduction import ReductionParams
from .regulator import RegulatorParams
from .scenarios import REGISTRY

ANALYSES = ("mato", "immersion", "sigma", "graph", "pe", "lyapunov", "limit_set")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class Overrides(_Strict):
    k: Optional[float] = None
    lam: Optional[float] = None
    ell: Optional[float] = None
    b: Optional[List[float]] = None
    a: Optional[List[float]] = None
    g: Optional[float] = None
    T: Optional[float] = None
    h: Optional[float] = None
    seed: Optional[int] = None
    rho: Optional[List[float]] = None
    w0: Optional[List[float]] = None
    z0: Optional[List[float]] = None
    e0: Optional[List[float]] = None
    xi0: Optional[List[float]] = None
    theta_hat0: Optional[List[float]] = None
    X0: Optional[List[float]] = None
    tol_e: Optional[float] = None
    terminal_fraction: Optional[float] = None
    divergence_bound: Optional[float] = None
    stabilizer_sign: Optional[float] = None


class ProbeSettings(_Strict):
    gain: Literal["k", "g", "lam"] = "k"
    floor: Optional[float] = None
    max_doublings: int = 11


class RunConfig(_Strict):
    scenario: str
    overrides: Overrides = Overrides()
    out: str = "out"
    analyses: List[str] = []
    coordinates: Literal["original", "reduced"] = "original"
    pe_window: float = 2.0 * math.pi
    probe: ProbeSettings = ProbeSettings()


_SCENARIO_FIELDS = ("T", "h", "seed", "rho", "w0", "z0", "e0", "xi0", "theta_hat0", "X0",
                    "tol_e", "terminal_fraction", "divergence_bound", "stabilizer_sign")


def parse_config(data: dict) -> RunConfig:
    try:
        cfg = RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc
    unknown = [a for a in cfg.analyses if a not in ANALYSES]
    if unknown:
        raise ConfigError(f"unknown analyses {unknown}; known: {', '.join(ANALYSES)}")
    if cfg.scenario not in REGISTRY:
        raise ConfigError(f"unknown scenario {cfg.scenario!r}; known: {', '.join(sorted(REGISTRY))}")
    return cfg


def load_document(path) -> dict:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return data


def apply_assignment(data: dict, assignment: str) -> dict:
    """Apply ``key=value`` to a raw config mapping.

    Bare keys that are not top-level settings go under ``overrides``;
    dotted keys address nested sections.  Values are parsed as YAML.
    """
    if "=" not in assignment:
        raise ConfigError(f"expected key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    key = key.strip()
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value for {key}: {exc}") from exc
    path = key.split(".")
    if len(path) == 1 and path[0] not in RunConfig.model_fields:
        path = ["overrides", path[0]]
    node = data
    for part in path[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{key}: {part} is not a section")
    node[path[-1]] = value
    return data


def build_scenario(cfg: RunConfig) -> Scenario:
    """Registry scenario with overrides applied.  Synthesis errors propagate."""
    ov = cfg.overrides
    named = REGISTRY[cfg.scenario]
    if ov.g is not None and "g" in inspect.signature(named.builder).parameters:
        scen = named.builder(g=ov.g)
    else:
        scen = named.build()
    reg = scen.regulator
    if any(v is not None for v in (ov.k, ov.lam, ov.ell, ov.b)):
        reg = RegulatorParams(
            b=tuple(ov.b) if ov.b is not None else reg.b,
            lam=reg.lam if ov.lam is None else ov.lam,
            k=reg.k if ov.k is None else ov.k,
            ell=reg.ell if ov.ell is None else ov.ell,
            q_dim=reg.q_dim,
        )
    red = scen.reduction
    if ov.a is not None or ov.g is not None:
        if red is None:
            raise ConfigError(f"scenario {cfg.scenario} has relative degree one; a and g do not apply")
        red = ReductionParams(a=tuple(ov.a) if ov.a is not None else red.a, g=red.g if ov.g is None else ov.g)
    changes = {name: getattr(ov, name) for name in _SCENARIO_FIELDS if getattr(ov, name) is not None}
    for name in ("rho", "w0", "z0", "e0", "xi0", "theta_hat0", "X0"):
        if name in changes:
            changes[name] = tuple(changes[name])
    return replace(scen, regulator=reg, reduction=red, **changes).validate()


def scenario_overrides(scen: Scenario) -> Overrides:
    """Every effective parameter of ``scen`` as explicit overrides."""
    values = {
        "k": scen.regulator.k,
        "lam": scen.regulator.lam,
        "ell": scen.regulator.ell,
        "b": list(scen.regulator.b),
    }
    if scen.reduction is not None:
        values["a"] = list(scen.reduction.a)
        values["g"] = scen.reduction.g
    for name in _SCENARIO_FIELDS:
        v = getattr(scen, name)
        values[name] = list(v) if isinstance(v, tuple) else v
    return Overrides(**values)


def scenario_to_config(scen: Scenario, **settings) -> RunConfig:
    if scen.name not in REGISTRY:
        raise ConfigError(f"scenario {scen.name!r} is not in the registry")
    return RunConfig(scenario=scen.name, overrides=scenario_overrides(scen), **settings)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(), sort_keys=True)
