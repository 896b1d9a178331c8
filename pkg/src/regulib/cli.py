"""Command-line front end.

    regulib run    --scenario harmonic1 [--config cfg.yaml] [--set k=10] [--out dir] [--analyses pe,limit_set]
    regulib probe  --scenario harmonic1 --gain k [--floor 0.01] [--max-doublings 11]
    regulib verify --scenario harmonic1

Exit codes: 0 success, 2 configuration or synthesis error, 3 divergence,
4 exhausted probe ladder, 5 failed structural checks.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import run_analyses, small_gain_probe, structural_checks
from .closed_loop import ScenarioError, simulate
from .config import apply_assignment, build_scenario, load_document, parse_config, scenario_overrides
from .errors import ConfigError, SynthesisError

log = logging.getLogger("regulib")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_PROBE, EXIT_VERIFY = 0, 2, 3, 4, 5


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _json_safe(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path: Path, payload: dict):
    path.write_text(json.dumps(_json_safe(payload), indent=2, sort_keys=True) + "\n")


def write_csv(path: Path, traj):
    header = ",".join(["t", *traj.labels])
    data = np.column_stack([traj.times, traj.states])
    np.savetxt(path, data, fmt="%.17g", delimiter=",", header=header, comments="")


def _resolve(args):
    data = load_document(args.config) if args.config else {}
    if args.scenario:
        data["scenario"] = args.scenario
    if "scenario" not in data:
        raise ConfigError("no scenario given (use --scenario or a config file)")
    if args.out:
        data["out"] = args.out
    if getattr(args, "analyses", None) is not None:
        data["analyses"] = [a for a in args.analyses.split(",") if a.strip()]
    for item in args.set or []:
        apply_assignment(data, item)
    cfg = parse_config(data)
    return cfg, build_scenario(cfg)


def _echo(cfg, scen) -> dict:
    echo = cfg.model_dump()
    echo["overrides"] = scenario_overrides(scen).model_dump()
    return echo


def cmd_run(args) -> int:
    cfg, scen = _resolve(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    log.info("simulating %s over [0, %g] with h=%g", scen.name, scen.T, scen.h)
    sim = simulate(scen, cfg.coordinates)
    write_csv(out / "trajectory.csv", sim.trajectory)
    summary = {
        "tool": "regulib",
        "version": __version__,
        "scenario": scen.name,
        "coordinates": cfg.coordinates,
        "params": _echo(cfg, scen),
        "diverged": sim.diverged,
        "divergence_time": sim.divergence_time,
        "metrics": sim.metrics.as_dict(),
    }
    if cfg.analyses:
        summary["analyses"] = run_analyses(scen, sim, cfg.analyses, cfg.pe_window)
    write_json(out / "summary.json", summary)
    if sim.diverged:
        log.error("state norm exceeded %g at t=%.4g", scen.divergence_bound, sim.divergence_time)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_probe(args) -> int:
    cfg, scen = _resolve(args)
    gain = args.gain or cfg.probe.gain
    floor = args.floor if args.floor is not None else cfg.probe.floor
    doublings = args.max_doublings if args.max_doublings is not None else cfg.probe.max_doublings
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    report = small_gain_probe(scen, gain, max_doublings=doublings, floor=floor)
    payload = {"tool": "regulib", "version": __version__, "scenario": scen.name, "params": _echo(cfg, scen)}
    payload.update(report.as_dict())
    write_json(out / "probe.json", payload)
    if report.exhausted:
        log.error("no passing %s up to %g", gain, report.ladder[-1].value)
        return EXIT_PROBE
    log.info("%s passes at %g", gain, report.passing_value)
    return EXIT_OK


def cmd_verify(args) -> int:
    cfg, scen = _resolve(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    checks = structural_checks(scen, cfg.pe_window)
    failed = [name for name, rep in checks.items() if not rep["passed"]]
    write_json(out / "verify.json", {
        "tool": "regulib",
        "version": __version__,
        "scenario": scen.name,
        "params": _echo(cfg, scen),
        "checks": checks,
        "failed": failed,
    })
    if failed:
        log.error("failed checks: %s", ", ".join(failed))
        return EXIT_VERIFY
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="regulib", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"regulib {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--scenario", help="registry key, e.g. harmonic1")
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a setting (repeatable)")
        p.add_argument("--out", help="output directory")
        return p

    run = common(sub.add_parser("run", help="simulate and write trajectory.csv + summary.json"))
    run.add_argument("--analyses", help="comma-separated subset of: mato,immersion,sigma,graph,pe,lyapunov,limit_set")
    run.set_defaults(func=cmd_run)

    probe = common(sub.add_parser("probe", help="double a gain until regulation succeeds"))
    probe.add_argument("--gain", choices=("k", "g", "lam"))
    probe.add_argument("--floor", type=float)
    probe.add_argument("--max-doublings", type=int)
    probe.set_defaults(func=cmd_probe)

    verify = common(sub.add_parser("verify", help="run the structural check suite"))
    verify.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ScenarioError, SynthesisError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
