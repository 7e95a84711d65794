"""JSON run configuration: schema, defaults, validation and solver construction.

A configuration is a flat JSON object tagged ``"schema_version": 1``.  Solver
fields live at the top level; each subcommand reads its own block under
``"experiments"``.  An experiment block may carry a ``"solver"`` object whose
fields override the top-level solver fields for that experiment only.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

from .dynamics import INTEGRATORS, SolverConfig
from .ergodicity_lab import digest
from .fourier_core import DissipationParams, fold_mode
from .hoermander import generator_check
from .levy_noise import FAMILIES, NoiseConfig, SubordinatorModel, check_admissibility

SCHEMA_VERSION = 1

SOLVER_FIELDS = ("truncation", "dt", "integrator", "jump_adapted", "max_halvings", "dissipation",
                 "forced_modes", "amplitudes", "subordinator", "eps_cut")

DEFAULT_CONFIG = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "truncation": 4,
    "dt": 1e-3,
    "integrator": "exponential-euler",
    "jump_adapted": True,
    "max_halvings": 6,
    "eps_cut": 1e-4,
    "dissipation": {"nu1": 1.0, "nu2": 1.0, "alpha": 1.25, "beta": 1.25},
    "forced_modes": [[0, 1], [0, -1], [1, 1], [-1, -1]],
    "amplitudes": {"0,1": [0.1, 0.1], "1,1": [0.1, 0.1]},
    "subordinator": {"family": "tempered-stable", "c": 0.25, "rho": 0.5, "lam": 1.0},
    "experiments": {
        "simulate": {"T": 2.0, "initial_norm": 1.0},
        "brackets": {"radius": 5, "signs": "measured"},
        "cascade": {"generations": 8, "radius": 4},
        "malliavin": {"T": 1.0, "cone": 0.5, "cone_truncation": 2, "probes": 100, "initial_norm": 1.0},
        "moments": {"M": 1000, "T": 6.0, "burn_in": 3.0, "record_every": 10, "initial_norm": 0.0,
                    "solver": {"dt": 0.01}},
        "e_property": {"M": 400, "t": 1.0, "deltas": [0.08, 0.04, 0.02, 0.01, 0.005],
                       "observable": "energy", "initial_norm": 1.0, "solver": {"dt": 0.01}},
        "irreducibility": {"M": 2000, "radius": 2.0, "gamma": 0.5, "T": 3.0, "candidates": 8, "pilot": 200,
                           "solver": {"dt": 0.01}},
        "invariant_measure": {"M": 100, "T": 40.0, "burn_in": 10.0, "initial_norm": 5.0, "record_every": 10,
                              "observables": ["energy", "mode:magnetic:0,1:0"], "solver": {"dt": 0.01}},
        "positivity": {"samples": 200, "cone": 0.5, "cone_truncation": 2, "radius": 2.0,
                       "eps": [1e-4, 1e-6, 1e-8, 1e-10], "horizon": 400.0,
                       "solver": {"truncation": 3, "dt": 0.0025,
                                  "dissipation": {"nu1": 0.05, "nu2": 0.05, "alpha": 1.1, "beta": 1.1},
                                  "amplitudes": {"0,1": [1.0, 1.0], "1,1": [1.0, 1.0]}}},
    },
}

EXPERIMENTS = tuple(DEFAULT_CONFIG["experiments"])


@dataclass(frozen=True)
class Diagnostic:
    level: str  # "error" or "warning"
    field: str
    message: str

    def __str__(self) -> str:
        return f"{self.level}: {self.field}: {self.message}"


class ConfigError(ValueError):
    def __init__(self, diagnostics: list[Diagnostic]):
        self.diagnostics = diagnostics
        super().__init__("; ".join(str(d) for d in diagnostics if d.level == "error"))


def default_config() -> dict:
    return copy.deepcopy(DEFAULT_CONFIG)


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("amplitudes",):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path: str | Path | None = None) -> dict:
    """Read a JSON config and fill absent fields from the defaults."""
    if path is None:
        return default_config()
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError([Diagnostic("error", str(path), f"invalid JSON: {exc}")]) from None
    if not isinstance(raw, dict):
        raise ConfigError([Diagnostic("error", str(path), "top level must be a JSON object")])
    return _merge(DEFAULT_CONFIG, raw)


def config_hash(config: dict) -> str:
    return digest(config)


def _parse_mode(key) -> tuple[int, int]:
    if isinstance(key, str):
        a, b = key.split(",")
        return int(a), int(b)
    a, b = key
    return int(a), int(b)


def _amplitude_table(raw) -> dict:
    table = {}
    for key, val in raw.items():
        k = _parse_mode(key)
        kh, _, _ = fold_mode(k)
        table[kh] = tuple(float(v) for v in val)
    return table


def solver_fields(config: dict, experiment: str | None = None) -> dict:
    """Top-level solver fields with the experiment's overrides applied."""
    fields = {k: copy.deepcopy(config[k]) for k in SOLVER_FIELDS if k in config}
    if experiment is not None:
        over = config.get("experiments", {}).get(experiment, {}).get("solver", {})
        fields = _merge(fields, over)
    return fields


def _check_solver(f: dict, where: str) -> list[Diagnostic]:
    out = []

    def err(field, msg):
        out.append(Diagnostic("error", where + field, msg))

    def warn(field, msg):
        out.append(Diagnostic("warning", where + field, msg))

    N = f.get("truncation")
    if not isinstance(N, int) or isinstance(N, bool) or N < 1:
        err("truncation", "must be a positive integer")
        N = None
    if not isinstance(f.get("dt"), (int, float)) or f["dt"] <= 0:
        err("dt", "must be a positive number")
    if f.get("integrator") not in INTEGRATORS:
        err("integrator", f"must be one of {', '.join(INTEGRATORS)}")
    if not isinstance(f.get("max_halvings"), int) or f["max_halvings"] < 0:
        err("max_halvings", "must be a nonnegative integer")
    if not isinstance(f.get("eps_cut"), (int, float)) or f["eps_cut"] <= 0:
        err("eps_cut", "must be a positive number")

    d = f.get("dissipation", {})
    try:
        DissipationParams(float(d["nu1"]), float(d["nu2"]), float(d["alpha"]), float(d["beta"]))
    except KeyError as exc:
        err("dissipation", f"missing field {exc.args[0]}")
    except (TypeError, ValueError) as exc:
        field = "dissipation"
        if "exponent" in str(exc):
            field += ".alpha" if float(d.get("alpha", 2)) <= 1 else ".beta"
        err(field, str(exc))

    modes = []
    try:
        modes = [_parse_mode(k) for k in f.get("forced_modes", [])]
    except (TypeError, ValueError):
        err("forced_modes", "must be a list of integer pairs")
    if not modes:
        err("forced_modes", "at least one forced mode is required")
    elif (0, 0) in modes:
        err("forced_modes", "the zero mode cannot be forced")
    else:
        rep = generator_check(modes)
        if not rep.symmetric:
            err("forced_modes", "the forced set must be symmetric under k -> -k")
        if not rep.nonparallel_distinct_norms:
            warn("forced_modes", "all forced directions are parallel or of equal norm: "
                                 "the bracket cascade will stall and the spanning condition fails")
        elif not rep.generator:
            warn("forced_modes", "the forced directions do not generate the integer lattice: "
                                 "the bracket cascade cannot reach every mode")
        if N is not None and max(abs(complex(*k)) for k in modes) > N:
            err("truncation", f"truncation {N} does not contain every forced mode")
        try:
            table = _amplitude_table(f.get("amplitudes", {}))
            NoiseConfig.from_symmetric(modes, table)
        except (TypeError, ValueError) as exc:
            err("amplitudes", str(exc))

    sub = f.get("subordinator")
    if sub is not None:
        params = {k: v for k, v in sub.items() if k != "family"}
        family = sub.get("family")
        if family not in FAMILIES:
            err("subordinator.family", f"unknown family {family!r}; known: {', '.join(FAMILIES)}")
        else:
            try:
                model = SubordinatorModel(family, params)
            except (TypeError, ValueError) as exc:
                err("subordinator", str(exc))
            else:
                rep = check_admissibility(model)
                if not rep.accepted:
                    err("subordinator", f"refused by the subordinator admissibility condition: the Levy measure "
                                        f"of the {family} family must have infinite activity and a finite "
                                        f"exponential moment")
    return out


def _check_experiments(config: dict, top: list[Diagnostic]) -> list[Diagnostic]:
    out = []
    seen = {(d.field, d.message) for d in top}
    ex = config.get("experiments", {})
    if not isinstance(ex, dict):
        return [Diagnostic("error", "experiments", "must be an object")]
    for name, block in ex.items():
        if name not in EXPERIMENTS:
            out.append(Diagnostic("error", f"experiments.{name}", "unknown experiment"))
            continue
        for key in ("M", "samples", "pilot", "candidates", "probes"):
            if key in block and (not isinstance(block[key], int) or block[key] < 1):
                out.append(Diagnostic("error", f"experiments.{name}.{key}", "must be a positive integer"))
        if "burn_in" in block and "T" in block and not 0 <= block["burn_in"] < block["T"]:
            out.append(Diagnostic("error", f"experiments.{name}.burn_in", "must lie in [0, T)"))
        if "solver" in block:
            bad = set(block["solver"]) - set(SOLVER_FIELDS)
            for key in sorted(bad):
                out.append(Diagnostic("error", f"experiments.{name}.solver.{key}", "not a solver field"))
            if not bad:
                prefix = f"experiments.{name}.solver."
                # report only what the overrides change
                out += [d for d in _check_solver(solver_fields(config, name), prefix)
                        if (d.field[len(prefix):], d.message) not in seen]
    return out


def validate_config(config: dict) -> list[Diagnostic]:
    """Field-level diagnostics; an empty list means the config is valid."""
    if config.get("schema_version") != SCHEMA_VERSION:
        return [Diagnostic("error", "schema_version", f"must be {SCHEMA_VERSION}")]
    out = []
    known = set(DEFAULT_CONFIG)
    for key in sorted(set(config) - known):
        out.append(Diagnostic("error", key, "unknown field"))
    if not isinstance(config.get("seed"), int):
        out.append(Diagnostic("error", "seed", "must be an integer"))
    top = _check_solver(solver_fields(config), "")
    out += top + _check_experiments(config, top)
    return out


def build_solver(config: dict, experiment: str | None = None) -> SolverConfig:
    """``SolverConfig`` for ``experiment`` (or the top-level fields); raises ``ConfigError`` if invalid."""
    f = solver_fields(config, experiment)
    diags = [d for d in _check_solver(f, "") if d.level == "error"]
    if diags:
        raise ConfigError(diags)
    d = f["dissipation"]
    noise = NoiseConfig.from_symmetric([_parse_mode(k) for k in f["forced_modes"]], _amplitude_table(f["amplitudes"]))
    sub = f.get("subordinator")
    model = None if sub is None else SubordinatorModel(sub["family"], {k: v for k, v in sub.items() if k != "family"})
    return SolverConfig(
        N=f["truncation"],
        dissipation=DissipationParams(float(d["nu1"]), float(d["nu2"]), float(d["alpha"]), float(d["beta"])),
        noise=noise,
        dt=float(f["dt"]),
        integrator=f["integrator"],
        jump_adapted=bool(f["jump_adapted"]),
        max_halvings=int(f["max_halvings"]),
        subordinator=model,
        eps_cut=float(f["eps_cut"]),
    )
