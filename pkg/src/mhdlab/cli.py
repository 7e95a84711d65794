"""``mhdlab <command> --config PATH [--seed N] [--out DIR] [--threads K]``.

Exit status: 0 success, 2 configuration error, 3 numerical failure,
4 inconclusive statistics.  Every artifact carries the config hash and the
master seed; the only time-dependent file is ``manifest.json``.
"""

from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import os
import sys
from importlib import metadata
from pathlib import Path

import numpy as np

from . import hoermander as hm
from .config import EXPERIMENTS, ConfigError, build_solver, config_hash, load_config, validate_config
from .dynamics import StepFailure, energy_ledger, evolve, ledger_csv, step_error
from .ergodicity_lab import (
    ExperimentPlan,
    _clean,
    e_property_probe,
    invariant_measure_compare,
    irreducibility_probe,
    malliavin_positivity,
    moment_experiment,
)
from .fourier_core import SpectralField, galerkin_space
from .variational import cone_minimum, malliavin_matrix, whitening_bounds

COMMANDS = ("simulate", "brackets", "cascade", "malliavin", "ergodicity", "moments")
OK, CONFIG_ERROR, NUMERICAL_FAILURE, INCONCLUSIVE = 0, 2, 3, 4


class Artifacts:
    """Writes artifacts into ``out`` stamped with the config hash and seed, and tracks their digests."""

    def __init__(self, out: Path, chash: str, seed: int):
        self.out, self.chash, self.seed = out, chash, seed
        self.files: dict[str, str] = {}

    def _write(self, name: str, text: str):
        data = text.encode()
        (self.out / name).write_bytes(data)
        self.files[name] = hashlib.sha256(data).hexdigest()

    def json(self, name: str, obj: dict):
        body = {"config_hash": self.chash, "seed": self.seed, **_clean(obj)}
        self._write(name, json.dumps(body, indent=2, sort_keys=True, allow_nan=False) + "\n")

    def csv(self, name: str, text: str):
        self._write(name, f"# config_hash={self.chash} seed={self.seed}\n" + text)

    def report(self, stem: str, report):
        self.json(f"{stem}.json", report.to_dict())
        self.csv(f"{stem}.csv", report.to_csv())


def _initial(config: dict, experiment: str, N: int, norm: float) -> np.ndarray:
    """Random start of the given norm, drawn from a stream reserved for ``experiment``."""
    if norm == 0:
        return np.zeros(galerkin_space(N).n)
    label = 1000 + EXPERIMENTS.index(experiment)
    rng = np.random.default_rng(np.random.SeedSequence([config["seed"], label]))
    return SpectralField.random(N, rng, norm=norm).coeffs


def run_simulate(config, art: Artifacts, threads: int) -> int:
    ex = config["experiments"]["simulate"]
    cfg = build_solver(config, "simulate")
    U0 = _initial(config, "simulate", cfg.N, ex["initial_norm"])
    traj = evolve(U0, None, ex["T"], cfg, seed=config["seed"])
    ledger = energy_ledger(traj)
    closure = ledger["energy"][-1] - ledger["energy"][0] + 2 * ledger["scheme_dissipation"][-1] - ledger["noise_work"][-1]
    art.csv("trajectory.csv", traj.to_csv())
    art.csv("energy_ledger.csv", ledger_csv(ledger))
    art.csv("subordinator_path.csv", traj.path.to_csv())
    art.json("simulate.json", {**traj.manifest(), "final_energy": float(ledger["energy"][-1]),
                               "ledger_closure": float(closure), "step_doubling_error": step_error(traj)})
    return OK


def run_brackets(config, art: Artifacts, threads: int) -> int:
    ex = config["experiments"]["brackets"]
    suites = [hm.lemma_suite(fam, ex["radius"], ex["signs"]) for fam in hm.FAMILIES]
    art.csv("brackets.csv", hm.bracket_report_csv(ex["radius"], ex["signs"], suites))
    art.json("brackets.json", {s.family: {"constant": s.constant, "max_relative_residual": s.max_relative_residual,
                                          "max_constant_deviation": s.max_constant_deviation,
                                          "checks": len(s.results), "passed": s.passed} for s in suites})
    return OK if all(s.passed for s in suites) else NUMERICAL_FAILURE


def run_cascade(config, art: Artifacts, threads: int) -> int:
    ex = config["experiments"]["cascade"]
    Z0 = [tuple(k) for k in config["forced_modes"]]
    report = hm.coverage_report(Z0, ex["generations"], ex["radius"])
    gen = hm.generator_check(Z0)
    art.json("cascade.json", {**report, "generator_check": {"symmetric": gen.symmetric, "generator": gen.generator,
                                                            "nonparallel_distinct_norms": gen.nonparallel_distinct_norms}})
    return OK


def run_malliavin(config, art: Artifacts, threads: int) -> int:
    ex = config["experiments"]["malliavin"]
    cfg = build_solver(config, "malliavin")
    U0 = _initial(config, "malliavin", cfg.N, ex["initial_norm"])
    traj = evolve(U0, None, ex["T"], cfg, seed=config["seed"])
    mm = malliavin_matrix(traj, traj.path, 0.0, ex["T"])
    op = mm.operator
    cm = cone_minimum(op, galerkin_space(cfg.N).low_mode_mask(ex["cone_truncation"]), ex["cone"])
    kappa = 1e-6 * float(np.trace(op)) / len(op)
    wb = whitening_bounds(traj, ex["T"], kappa, ex["probes"], np.random.SeedSequence([config["seed"], 7]))
    art.json("malliavin_matrix.json", json.loads(mm.to_json()))
    art.json("malliavin.json", {
        "trace": mm.trace, "eigenvalues": mm.eigenvalues, "symmetry_defect": float(np.abs(mm.entries - mm.entries.T).max()),
        "cone_minimum": {"lower": cm.lower, "upper": cm.upper, "multiplier": cm.multiplier,
                         "low_mode_eigenvalue": cm.low_mode_eigenvalue, "cone": ex["cone"],
                         "cone_truncation": ex["cone_truncation"]},
        "whitening": {**wb, "kappa": kappa}, "jumps": len(traj.path.jump_times)})
    return OK


def _plan(config, name: str, threads: int, **kw) -> ExperimentPlan:
    return ExperimentPlan(name, build_solver(config, name), seed=config["seed"], threads=threads, **kw)


def _moments(config, threads: int):
    ex = config["experiments"]["moments"]
    cfg = build_solver(config, "moments")
    U0 = _initial(config, "moments", cfg.N, ex["initial_norm"])
    plan = _plan(config, "moments", threads, M=ex["M"], T=ex["T"], burn_in=ex["burn_in"],
                 record_every=ex["record_every"], initial_conditions=(U0,))
    return moment_experiment(plan)


def run_moments(config, art: Artifacts, threads: int) -> int:
    report = _moments(config, threads)
    art.report("moments", report)
    return INCONCLUSIVE if report.inconclusive else OK


def run_ergodicity(config, art: Artifacts, threads: int) -> int:
    """All probes; one JSON and CSV report each plus a pass/fail summary."""
    exs = config["experiments"]
    reports = {"moments": _moments(config, threads)}
    art.report("moments", reports["moments"])

    ex = exs["e_property"]
    cfg = build_solver(config, "e_property")
    U0 = _initial(config, "e_property", cfg.N, ex["initial_norm"])
    r = e_property_probe(U0, ex["deltas"], ex["observable"], ex["t"],
                         _plan(config, "e_property", threads, M=ex["M"], T=ex["t"]))
    art.report("e_property", r)
    reports["e_property"] = r

    ex = exs["irreducibility"]
    r = irreducibility_probe(ex["radius"], ex["gamma"], ex["T"],
                             _plan(config, "irreducibility", threads, M=ex["M"], T=ex["T"]),
                             candidates=ex["candidates"], pilot=ex["pilot"])
    art.report("irreducibility", r)
    reports["irreducibility"] = r

    ex = exs["invariant_measure"]
    cfg = build_solver(config, "invariant_measure")
    Ub = _initial(config, "invariant_measure", cfg.N, ex["initial_norm"])
    r = invariant_measure_compare(np.zeros(cfg.n), Ub,
                                  _plan(config, "invariant_measure", threads, M=ex["M"], T=ex["T"], burn_in=ex["burn_in"],
                                        record_every=ex["record_every"], observables=tuple(ex["observables"])))
    art.report("invariant_measure", r)
    reports["invariant_measure"] = r

    ex = exs["positivity"]
    r = malliavin_positivity(_plan(config, "positivity", threads, M=ex["samples"], T=ex["horizon"]),
                             ex["cone"], ex["cone_truncation"], ex["eps"], ex["radius"])
    art.report("positivity", r)
    reports["positivity"] = r

    summary = {name: {"passed": r.passed, "inconclusive": r.inconclusive, "checks": r.checks}
               for name, r in reports.items()}
    art.json("ergodicity.json", summary)
    return INCONCLUSIVE if any(r.inconclusive for r in reports.values()) else OK


RUNNERS = {"simulate": run_simulate, "brackets": run_brackets, "cascade": run_cascade,
           "malliavin": run_malliavin, "ergodicity": run_ergodicity, "moments": run_moments}


def _version() -> str:
    try:
        return metadata.version("mhdlab")
    except metadata.PackageNotFoundError:
        return "unknown"


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mhdlab", description="Fractional MHD with degenerate subordinated noise: "
                                                           "simulation, bracket checks and ergodicity probes.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", type=Path, help="JSON config (defaults are used for absent fields)")
    p.add_argument("--seed", type=int, help="master seed, overrides the config")
    p.add_argument("--out", type=Path, help="output directory (default: mhdlab-<command>)")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker threads for ensembles")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
    except OSError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return CONFIG_ERROR
    except ConfigError as exc:
        for d in exc.diagnostics:
            print(d, file=sys.stderr)
        return CONFIG_ERROR
    if args.seed is not None:
        config["seed"] = args.seed
    diags = validate_config(config)
    for d in diags:
        print(d, file=sys.stderr)
    if any(d.level == "error" for d in diags):
        return CONFIG_ERROR
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return CONFIG_ERROR

    out = args.out or Path(f"mhdlab-{args.command}")
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        print(f"error: output directory {out}: {exc}", file=sys.stderr)
        return CONFIG_ERROR

    chash = config_hash(config)
    art = Artifacts(out, chash, config["seed"])
    art.json("config.json", {"config": config})
    message = None
    try:
        status = RUNNERS[args.command](config, art, args.threads)
    except (StepFailure, FloatingPointError, np.linalg.LinAlgError) as exc:
        status, message = NUMERICAL_FAILURE, f"{type(exc).__name__}: {exc}"
        print(f"error: numerical failure: {exc}", file=sys.stderr)
    except ConfigError as exc:
        for d in exc.diagnostics:
            print(d, file=sys.stderr)
        return CONFIG_ERROR

    manifest = {
        "command": args.command, "config_hash": chash, "seed": config["seed"], "exit_status": status,
        "message": message, "version": _version(), "threads": args.threads,
        "created": datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds"),
        "warnings": [str(d) for d in diags], "artifacts": dict(sorted(art.files.items())),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"{args.command}: exit {status}, {len(art.files)} artifacts in {out}")
    return status


if __name__ == "__main__":
    sys.exit(main())
