"""Batch command-line front end.

    dampwave <subcommand> CONFIG.json [--set section.key=value ...] [--out DIR]

The configuration is a JSON object with sections ``metric``, ``grid``,
``solver``, ``data`` and ``experiment`` plus top-level ``out``, ``threads``
and ``seed``.  Every section is optional; missing keys take the defaults of
the corresponding dataclass.  Unknown keys are errors.  The fully resolved
configuration is echoed into each JSON summary and re-parses to the same
RunConfig.

Exit codes: 0 pass/complete, 2 experiment failed its check, 1 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import analysis, io
from .data import InitialDataSpec, make_initial_data
from .grid import GridSpec
from .metric import MetricSpec, check_decay, random_rays, trace_geodesics
from .norms import energy_report
from .solver import SolverConfig, WaveOperator, run

SUBCOMMANDS = ("simulate", "check-metric", "geodesics", "verify-energy", "picard", "dichotomy",
               "sweep-lifespan", "mms")

EXIT_OK, EXIT_USAGE, EXIT_FAIL = 0, 1, 2


class ConfigError(ValueError):
    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("\n".join(self.problems))


@dataclass(frozen=True)
class ExperimentParams:
    """Knobs that belong to one subcommand only; unused ones are ignored."""

    # geodesics
    rays: int = 512
    ray_r_max: float = 5.0
    t_max: float = 200.0
    r_escape: float = 50.0
    ray_dt: float = 0.01
    h_drift_tol: float = 1e-6
    # check-metric
    decay_order: int = 2
    # verify-energy: F = forcing_amplitude * exp(-t) * exp(-|x|^2)
    forcing_amplitude: float = 0.0
    # picard
    k_max: int = 4
    picard_T: Optional[float] = None
    eps_lo: Optional[float] = None
    eps_hi: Optional[float] = None
    bisection_steps: int = 8
    # sweep-lifespan
    eps_list: tuple = ()
    surrogate: bool = False
    surrogate_dt: float = 1e-3
    # mms
    mms_target: str = "all"
    mms_levels: int = 2
    # simulate
    trajectory_format: str = "csv"

    def __post_init__(self):
        object.__setattr__(self, "eps_list", tuple(float(e) for e in self.eps_list))

    def violations(self) -> list[str]:
        errors = []
        if self.rays < 1:
            errors.append("rays must be at least 1")
        for name in ("ray_r_max", "t_max", "r_escape", "ray_dt", "h_drift_tol", "surrogate_dt"):
            if not getattr(self, name) > 0:
                errors.append(f"{name} must be positive")
        if self.decay_order not in (0, 1, 2):
            errors.append("decay_order must be 0, 1 or 2")
        if self.k_max < 2:
            errors.append("k_max must be at least 2")
        if self.bisection_steps < 0:
            errors.append("bisection_steps must be nonnegative")
        if (self.eps_lo is None) != (self.eps_hi is None):
            errors.append("eps_lo and eps_hi must be given together")
        elif self.eps_lo is not None and not 0 < self.eps_lo < self.eps_hi:
            errors.append("need 0 < eps_lo < eps_hi")
        if any(not e > 0 for e in self.eps_list):
            errors.append("eps_list entries must be positive")
        if self.mms_target not in ("all",) + analysis.MMS_TARGETS:
            errors.append(f"mms_target must be 'all' or one of {', '.join(analysis.MMS_TARGETS)}")
        if self.mms_levels < 2:
            errors.append("mms_levels must be at least 2")
        if self.trajectory_format not in ("csv", "binary", "none"):
            errors.append("trajectory_format must be 'csv', 'binary' or 'none'")
        return errors


# field kinds: "num", "int", "bool", "str", "num?" (number or null), "vec?" (list or null),
# "vecs" (list of numbers)
_SCHEMA = {
    "metric": (MetricSpec, {"rho1": "num", "rho2": "num", "delta1": "num", "delta2": "num",
                            "center2": "vec?", "n": "int"}),
    "grid": (GridSpec, {"kind": "str", "extent": "num", "points": "int", "n": "int",
                        "periodic": "bool"}),
    "solver": (SolverConfig, {"p": "num", "mu": "num", "beta": "num", "cfl": "num",
                              "blowup_threshold": "num", "horizon": "num",
                              "nonlinearity_on": "bool", "cadence": "num", "dt_max": "num?",
                              "boundary_guard": "bool", "fixed_point_tol": "num",
                              "fixed_point_iters": "int"}),
    "data": (InitialDataSpec, {"profile": "str", "width": "num", "n": "int", "eps": "num",
                               "normalization": "str", "displacement": "num",
                               "velocity": "num"}),
    "experiment": (ExperimentParams, {
        "rays": "int", "ray_r_max": "num", "t_max": "num", "r_escape": "num", "ray_dt": "num",
        "h_drift_tol": "num", "decay_order": "int", "forcing_amplitude": "num", "k_max": "int",
        "picard_T": "num?", "eps_lo": "num?", "eps_hi": "num?", "bisection_steps": "int",
        "eps_list": "vecs", "surrogate": "bool", "surrogate_dt": "num", "mms_target": "str",
        "mms_levels": "int", "trajectory_format": "str"}),
}
_TOP = {"subcommand": "str?", "out": "str", "threads": "int", "seed": "int"}


def _is_num(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def _type_ok(kind: str, x) -> bool:
    if kind.endswith("?"):
        if x is None:
            return True
        kind = kind[:-1]
    if kind == "num":
        return _is_num(x)
    if kind == "int":
        return isinstance(x, int) and not isinstance(x, bool)
    if kind == "bool":
        return isinstance(x, bool)
    if kind == "str":
        return isinstance(x, str)
    if kind in ("vec", "vecs"):
        return isinstance(x, (list, tuple)) and all(_is_num(v) for v in x)
    raise AssertionError(kind)


@dataclass(frozen=True)
class RunConfig:
    subcommand: Optional[str] = None
    metric: MetricSpec = field(default_factory=MetricSpec)
    grid: GridSpec = field(default_factory=GridSpec)
    solver: SolverConfig = field(default_factory=SolverConfig)
    data: InitialDataSpec = field(default_factory=InitialDataSpec)
    experiment: ExperimentParams = field(default_factory=ExperimentParams)
    out: str = "out"
    threads: int = 1
    seed: int = 0

    def to_dict(self) -> dict:
        doc = {"subcommand": self.subcommand, "out": self.out, "threads": self.threads,
               "seed": self.seed}
        for section, (_, keys) in _SCHEMA.items():
            obj = getattr(self, section)
            vals = {}
            for k in keys:
                v = getattr(obj, k)
                vals[k] = list(v) if isinstance(v, tuple) else v
            doc[section] = vals
        return doc


def _parse_override(text: str):
    if "=" not in text:
        raise ConfigError(f"--set expects key=value (got {text!r})")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(doc: dict, overrides) -> dict:
    doc = json.loads(json.dumps(doc))
    for text in overrides or ():
        path, value = _parse_override(text)
        node = doc
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {text!r}: {part!r} is not a section")
        node[path[-1]] = value
    return doc


def config_from_dict(doc, overrides=(), env=None) -> RunConfig:
    """Validate ``doc`` as a whole and build a RunConfig, listing every problem."""
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object")
    doc = apply_overrides(doc, overrides)
    problems = []
    for key in doc:
        if key not in _SCHEMA and key not in _TOP:
            problems.append(f"unknown key {key!r}")
    top = {}
    for key, kind in _TOP.items():
        if key in doc:
            if not _type_ok(kind, doc[key]):
                problems.append(f"{key}: expected {kind.rstrip('?')}, got {doc[key]!r}")
            else:
                top[key] = doc[key]
    env = os.environ if env is None else env
    if env.get("DAMPWAVE_THREADS"):
        try:
            top["threads"] = int(env["DAMPWAVE_THREADS"])
        except ValueError:
            problems.append(f"DAMPWAVE_THREADS must be an integer (got {env['DAMPWAVE_THREADS']!r})")
    if top.get("threads", 1) < 1:
        problems.append("threads must be at least 1")
    if top.get("subcommand") is not None and top["subcommand"] not in SUBCOMMANDS:
        problems.append(f"subcommand must be one of {', '.join(SUBCOMMANDS)}")

    built = {}
    for section, (cls, keys) in _SCHEMA.items():
        raw = doc.get(section, {})
        if not isinstance(raw, dict):
            problems.append(f"{section}: expected an object")
            continue
        # unknown keys are reported but do not stop checking the known ones
        kwargs, ok = {}, True
        for k, v in raw.items():
            if k not in keys:
                problems.append(f"{section}: unknown key {k!r}")
            elif not _type_ok(keys[k], v):
                problems.append(f"{section}.{k}: expected {keys[k].rstrip('?')}, got {v!r}")
                ok = False
            else:
                kwargs[k] = tuple(v) if isinstance(v, list) else v
        if not ok:
            continue
        try:
            obj = cls(**kwargs)
        except ValueError as exc:
            problems.extend(f"{section}: {m}" for m in str(exc).split("; "))
            continue
        extra = obj.violations() if isinstance(obj, ExperimentParams) else []
        problems.extend(f"experiment: {m}" for m in extra)
        if not extra and not set(raw) - set(keys):
            built[section] = obj

    if {"metric", "grid", "data"} <= built.keys():
        m, g, d = built["metric"], built["grid"], built["data"]
        if not m.n == g.n == d.n:
            problems.append(f"dimensions disagree: metric.n={m.n}, grid.n={g.n}, data.n={d.n}")
        elif g.is_radial and not m.is_radial:
            problems.append("radial grids need a radial metric (delta2 = 0 or center2 at the origin)")
    if problems:
        raise ConfigError(problems)
    return RunConfig(**top, **built)


def load_config(path, overrides=(), env=None) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    return config_from_dict(doc, overrides, env)


# --- experiments -------------------------------------------------------------
# Each returns (verdict, passed, measured constants) after writing its files.


def _simulate(rc: RunConfig, w: io.ExperimentWriter):
    op = WaveOperator(rc.grid, rc.metric)
    state, info = make_initial_data(rc.data, rc.grid, rc.solver.p)
    out = run(rc.solver, rc.metric, rc.grid, state, op)
    rep = energy_report(out.trajectory, op, cadence=rc.solver.cadence)
    rep.write_csv(w.path("csv", ".csv"))
    fmt = rc.experiment.trajectory_format
    if fmt == "csv":
        io.write_trajectory_csv(w.path("trajectory", ".traj.csv"), out.trajectory)
    elif fmt == "binary":
        io.write_trajectory_binary(w.path("trajectory", ".dwav"), out.trajectory)
    verdict = out.status + (" (boundary-limited)" if out.boundary_limited else "")
    measured = dict(info, blowup_time=out.blowup_time, steps=out.steps, dt=out.dt,
                    safe_time=out.safe_time, warning=out.warning, final_le=rep.final_le)
    return verdict, True, measured


def _check_metric(rc: RunConfig, w: io.ExperimentWriter):
    rep = check_decay(rc.metric, rc.experiment.decay_order)
    rows = list(rep.rows())
    cols = ["component", "multi_index", "order", "sup", "sup_doubled", "stable"]
    w.write_rows(cols, ([r[c] for c in cols] for r in rows))
    measured = {f"g{i}_order{o}_sup": rep.order_sup(i, o)
                for i in (1, 2) for o in range(rep.max_order + 1)}
    return ("decay-stable" if rep.passed else "decay-unstable"), rep.passed, measured


def _geodesics(rc: RunConfig, w: io.ExperimentWriter):
    e = rc.experiment
    rays = random_rays(rc.metric.n, e.rays, e.ray_r_max, rc.seed)
    rep = trace_geodesics(rc.metric, rays, e.t_max, e.r_escape, e.ray_dt)
    rep.write_csv(w.path("csv", ".csv"))
    drift = rep.max_h_drift
    ok = rep.escape_fraction == 1.0 and math.isfinite(drift) and drift <= e.h_drift_tol
    measured = {"escape_fraction": rep.escape_fraction, "max_escape_time": rep.max_escape_time,
                "max_h_drift": drift, "inconclusive": int(rep.inconclusive.sum())}
    return ("nontrapping-probe-passed" if ok else "nontrapping-probe-failed"), ok, measured


def gaussian_source(grid: GridSpec, amp: float):
    """F(t, x) = amp exp(-t) exp(-|x|^2)."""
    profile = amp * np.exp(-grid.radius() ** 2)

    def forcing(t):
        return math.exp(-t) * profile
    return forcing


def _verify_energy(rc: RunConfig, w: io.ExperimentWriter):
    s = rc.solver
    state, info = make_initial_data(rc.data, rc.grid, s.p)
    forcing = None
    if rc.experiment.forcing_amplitude != 0.0:
        forcing = gaussian_source(rc.grid, rc.experiment.forcing_amplitude)
    rep = analysis.verify_energy_estimate(rc.metric, rc.grid, state, s.mu, s.beta, forcing,
                                          s.horizon, s.cfl, s.cadence)
    w.write_rows(["t", "ratio"], zip(rep.times.tolist(), rep.ratios.tolist()))
    measured = {"measured_ratio": rep.measured_ratio, "c_slack": rep.c_slack,
                "gronwall_factor": rep.factor, "bound": rep.bound, "drift": rep.drift}
    return ("estimate-holds" if rep.passed else "estimate-violated"), rep.passed, measured


def _picard_rows(reports):
    for rep in reports:
        for k, d in enumerate(rep.diffs):
            f = rep.factors[k - 1] if 0 < k <= len(rep.factors) else None
            yield rep.eps, k, d, f


def _picard(rc: RunConfig, w: io.ExperimentWriter):
    e = rc.experiment
    cols = ["eps", "k", "diff", "factor"]
    if e.eps_lo is not None:
        try:
            res = analysis.find_contraction_threshold(rc.metric, rc.grid, rc.data, rc.solver,
                                                      e.eps_lo, e.eps_hi, e.bisection_steps,
                                                      e.k_max, e.picard_T)
        except ValueError as exc:
            w.write_rows(cols, ())
            return "no-contraction", False, {"no_contraction": True, "error": str(exc)}
        w.write_rows(cols, _picard_rows(res.reports))
        measured = {"eps0": res.eps0, "eps_fail": res.eps_fail, "no_contraction": False}
        return "contraction-threshold-found", True, measured
    rep = analysis.picard_iterate(rc.metric, rc.grid, rc.data, rc.solver, e.k_max, e.picard_T)
    w.write_rows(cols, _picard_rows([rep]))
    measured = {"eps": rep.eps, "eps_p": rep.eps_p, "T": rep.T, "diffs": rep.diffs,
                "factors": rep.factors, "no_contraction": rep.no_contraction,
                "contracting": rep.contracting, "degenerate": rep.degenerate, "C1": rep.c1,
                "C2": rep.c2, "T_formula": rep.t_formula}
    if rep.degenerate:
        return "degenerate", True, measured
    if rep.no_contraction:
        return "no-contraction", False, measured
    return ("contracting" if rep.contracting else "weak-contraction"), rep.contracting, measured


def _dichotomy(rc: RunConfig, w: io.ExperimentWriter):
    res = analysis.dichotomy_run(rc.metric, rc.grid, rc.solver, rc.data)
    res.report.write_csv(w.path("csv", ".csv"))
    measured = dict(res.report.measured, eps=res.eps, blowup_time=res.blowup_time,
                    data=res.data_info)
    return res.verdict, res.verdict != "inconclusive", measured


def _sweep(rc: RunConfig, w: io.ExperimentWriter):
    e = rc.experiment
    if not e.eps_list:
        raise ConfigError("sweep-lifespan needs experiment.eps_list")
    res = analysis.lifespan_sweep(rc.metric, rc.grid, rc.solver, rc.data, e.eps_list,
                                  surrogate=e.surrogate, workers=rc.threads,
                                  surrogate_dt=e.surrogate_dt)
    w.write_rows(["eps", "outcome", "T_star", "censored"],
                 ((r.eps, r.outcome, r.T_star, int(r.censored)) for r in res.records))
    f = res.fit
    measured = {"slope": f.slope, "intercept": f.intercept, "r2": f.r2, "fit_points": f.points,
                "fit_defined": f.defined, "monotone": res.monotone,
                "censored_eps": [r.eps for r in res.censored],
                "closed_form_slope": res.closed_form_slope}
    ok = f.defined and res.monotone
    return ("fit" if f.defined else "fit-undefined"), ok, measured


def _mms(rc: RunConfig, w: io.ExperimentWriter):
    e = rc.experiment
    names = analysis.MMS_TARGETS if e.mms_target == "all" else (e.mms_target,)
    results = [analysis.mms_convergence(nm, rc.metric, rc.grid, rc.solver, e.mms_levels)
               for nm in names]

    def rows():
        for r in results:
            ratios = [None] + r.ratios
            for h, err, q, sec in zip(r.spacings, r.errors, ratios, r.seconds):
                yield r.target, h, err, q, sec
    w.write_rows(["target", "h", "l2_error", "ratio", "seconds"], rows())
    ok = all(r.passed() for r in results)
    measured = {r.target: {"errors": r.errors, "ratios": r.ratios} for r in results}
    return ("converging" if ok else "not-converging"), ok, measured


_HANDLERS = {
    "simulate": _simulate,
    "check-metric": _check_metric,
    "geodesics": _geodesics,
    "verify-energy": _verify_energy,
    "picard": _picard,
    "dichotomy": _dichotomy,
    "sweep-lifespan": _sweep,
    "mms": _mms,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{message}\n{self.format_usage().strip()}")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="dampwave", description="Damped semilinear wave laboratory.")
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("config", help="JSON run configuration")
    ap.add_argument("--set", dest="overrides", action="append", default=[],
                    metavar="KEY=VALUE", help="override a config entry, e.g. solver.p=3")
    ap.add_argument("--out", default=None, help="output directory (overrides config 'out')")
    return ap


def run_command(argv, env=None, stdout=None, stderr=None) -> int:
    stdout = sys.stdout if stdout is None else stdout
    stderr = sys.stderr if stderr is None else stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        overrides = list(args.overrides)
        if args.out is not None:
            overrides.append("out=" + json.dumps(args.out))
        overrides.append("subcommand=" + json.dumps(args.subcommand))
        rc = load_config(args.config, overrides, env)
        writer = io.ExperimentWriter(rc.out, args.subcommand, rc.to_dict())
        verdict, ok, measured = _HANDLERS[args.subcommand](rc, writer)
    except ConfigError as exc:
        print("configuration error:", file=stderr)
        for p in exc.problems:
            print(f"  {p}", file=stderr)
        return EXIT_USAGE
    except analysis.SolverInstabilityError as exc:
        print(f"{argv[0]}: solver instability: {exc}", file=stderr)
        return EXIT_FAIL
    params = rc.to_dict()
    summary = writer.summary(params, verdict, measured)
    print(f"{args.subcommand}: {verdict} [{'pass' if ok else 'fail'}] -> {summary}", file=stdout)
    return EXIT_OK if ok else EXIT_FAIL


def main(argv=None) -> None:
    sys.exit(run_command(sys.argv[1:] if argv is None else argv))


if __name__ == "__main__":
    main()
