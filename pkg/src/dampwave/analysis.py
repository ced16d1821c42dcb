"""Experiments: energy-estimate checks, Picard contraction, damping conversion,
global existence vs blow-up runs and lifespan sweeps.

Constants are measured per run and reported; nothing here hard-codes the
existential constants of the estimates being probed.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy import stats

from .data import InitialDataSpec, make_initial_data
from .grid import GridSpec, GridState
from .metric import MetricSpec
from .norms import (DyadicPartition, EnergyReport, NormEvaluator,
                    energy_report)
from .solver import (Outcome, SolverConfig, WaveOperator, damped_gaussian_target, flat_wave_target,
                     manufactured_forcing, ode_oracle_blowup, power_nonlinearity, run)


PICARD_NOISE_FLOOR = 1e-10


class SolverInstabilityError(RuntimeError):
    """A linear run blew up, which points at a bad time-step setup."""


def glassey_exponent(n: int) -> float:
    """Critical power 1 + 2 / (n - 1)."""
    return 1.0 + 2.0 / (n - 1.0)


def gronwall_factor(mu: float, beta: float) -> float:
    """exp(|mu| / (beta - 1)) = exp(int_0^inf |mu| (1+t)^-beta dt)."""
    if not beta > 1:
        raise ValueError("beta must exceed 1")
    return math.exp(abs(mu) / (beta - 1.0))


# --- energy estimate ---------------------------------------------------------


@dataclass
class GronwallReport:
    times: np.ndarray
    ratios: np.ndarray
    measured_ratio: float
    c_slack: float
    factor: float
    mu: float
    beta: float

    @property
    def bound(self) -> float:
        return self.c_slack * self.factor

    @property
    def passed(self) -> bool:
        return self.measured_ratio <= 1.05 * self.bound

    @property
    def drift(self) -> float:
        return float(np.max(np.abs(self.ratios - 1.0)))


def verify_energy_estimate(metric, grid: GridSpec, data: GridState, mu: float, beta: float,
                           forcing: Optional[Callable] = None, horizon: float = 10.0,
                           cfl: float = 0.5, cadence: float = 20.0) -> GronwallReport:
    """Run the linear damped equation and track E(t) / (E(0) + int_0^t ||F||/sqrt2).

    The 1/sqrt2 matches E^2 = 1/2 int (...): then E' <= ||F||/sqrt2 + |mu|(1+t)^-beta E,
    so the ratio stays below exp(|mu|/(beta-1)) up to the metric slack.
    """
    if not beta > 1:
        raise ValueError("beta must exceed 1 (scattering damping)")
    op = WaveOperator(grid, metric)
    cfg = SolverConfig(mu=mu, beta=beta, cfl=cfl, horizon=horizon, nonlinearity_on=False,
                       forcing=forcing, cadence=cadence, boundary_guard=forcing is None)
    out = run(cfg, metric, grid, data, op)
    if out.status == "blowup":
        raise SolverInstabilityError("linear run blew up; check cfl and dt_max")
    ev = NormEvaluator(grid, 0)
    e0 = math.sqrt(op.energy_squared(data.u, data.v))
    times, ratios = [], []
    src_int = 0.0
    prev = None
    slack = 1.0
    for s in out.trajectory:
        if forcing is not None:
            fn = math.sqrt(float(np.sum(op.mass * forcing(s.t) ** 2)) / 2.0)
            if prev is not None:
                src_int += 0.5 * (s.t - prev[0]) * (prev[1] + fn)
            prev = (s.t, fn)
        e = math.sqrt(op.energy_squared(s.u, s.v))
        flat = float(ev.gradient_norms(s)[0])
        if e > 0 and flat > 0:
            q = math.sqrt(2.0) * e / flat
            slack = max(slack, q, 1.0 / q)
        denom = e0 + src_int
        times.append(s.t)
        ratios.append(e / denom if denom > 0 else 1.0)
    ratios = np.array(ratios)
    return GronwallReport(times=np.array(times), ratios=ratios, measured_ratio=float(ratios.max()),
                          c_slack=slack, factor=gronwall_factor(mu, beta), mu=mu, beta=beta)


# --- Picard iteration ----------------------------------------------------------


@dataclass
class PicardReport:
    eps: float
    eps_p: float
    T: float
    diffs: list
    factors: list
    contracting: bool
    no_contraction: bool
    degenerate: bool
    c1: float = math.nan
    c2: float = math.nan
    t_formula: float = math.nan
    iterate_norms: list = field(default_factory=list)

    @property
    def max_factor(self) -> float:
        return max(self.factors) if self.factors else math.nan

    @property
    def first_factor(self) -> float:
        return self.factors[0] if self.factors else math.nan


def _e_t_norm(ev: NormEvaluator, states_a, states_b=None) -> float:
    """sup over samples of sum_{|a|<=2} ||d Y^a (u_a - u_b)||_2."""
    best = 0.0
    for k, sa in enumerate(states_a):
        if states_b is None:
            s = sa
        else:
            sb = states_b[k]
            s = GridState(sa.t, sa.u - sb.u, sa.v - sb.v)
        best = max(best, ev.order_sum(ev.gradient_norms(s), 2))
    return best


def picard_iterate(metric, grid: GridSpec, data: InitialDataSpec, cfg: SolverConfig,
                   k_max: int = 4, T: float | None = None) -> PicardReport:
    """u_0 = 0, u_{k+1} = Gamma u_k: the linear damped solve with source |d_t u_k|^p.

    Differences are measured in sup_{t<=T} ||d Y^{<=2} .||_2 on the sampled
    trajectories; factors are ratios of consecutive differences.
    """
    T = cfg.horizon if T is None else T
    op = WaveOperator(grid, metric)
    ev = NormEvaluator(grid, 2)
    u0, info = make_initial_data(data, grid, cfg.p, ev)
    lin = replace(cfg, horizon=T, nonlinearity_on=False, forcing=None)
    eps_p = data.eps ** cfg.p
    if info["amplitude"] == 0.0:
        return PicardReport(eps=data.eps, eps_p=eps_p, T=T, diffs=[0.0] * k_max, factors=[],
                            contracting=False, no_contraction=False, degenerate=True)

    prev_all = None
    prev_samples = None
    diffs, norms = [], []
    broke = False
    for k in range(k_max):
        if prev_all is None:
            src = None
        else:
            vs = np.stack([s.v for s in prev_all])
            t_start = prev_all[0].t
            dt_prev = prev_all[1].t - t_start

            def src(t, vs=vs, t_start=t_start, dt_prev=dt_prev):
                i = int(round((t - t_start) / dt_prev - 0.5))
                i = min(max(i, 0), len(vs) - 2)
                return power_nonlinearity(0.5 * (vs[i] + vs[i + 1]), cfg.p)
        out = run(replace(lin, forcing=src, boundary_guard=True), metric, grid, u0, op, keep_all=True)
        if out.status == "blowup" or out.boundary_limited:
            broke = True
            break
        samples = out.trajectory
        if prev_samples is None:
            diffs.append(_e_t_norm(ev, samples))
        else:
            diffs.append(_e_t_norm(ev, samples, prev_samples))
        norms.append(_e_t_norm(ev, samples))
        prev_all, prev_samples = out.all_states, samples

    # once a difference sinks to roundoff relative to the first iterate, the
    # following ratio measures floating-point noise rather than the map
    floor = PICARD_NOISE_FLOOR * diffs[0] if diffs else 0.0
    factors = [diffs[k + 1] / diffs[k] for k in range(len(diffs) - 1) if diffs[k] > floor]
    finite = all(math.isfinite(f) for f in factors)
    no_contraction = broke or not finite or any(f >= 1.0 for f in factors)
    contracting = (not no_contraction) and bool(factors) and max(factors) <= 0.5

    # measured analogues of the local-existence constants
    c1 = norms[0] / info["achieved_size"] if norms else math.nan
    c2 = math.nan
    t_formula = math.nan
    if len(diffs) > 1 and norms[0] > 0:
        c2 = diffs[1] / (c1 * T * norms[0] ** cfg.p)
        arg = 1.0 / (2.0 ** cfg.p * c1 ** cfg.p * c2 * data.eps ** (cfg.p - 1.0)) if data.eps > 0 else math.inf
        t_formula = math.log(arg) / c1 if arg > 0 else math.nan
    return PicardReport(eps=data.eps, eps_p=eps_p, T=T, diffs=diffs, factors=factors,
                        contracting=contracting, no_contraction=no_contraction, degenerate=False,
                        c1=c1, c2=c2, t_formula=t_formula, iterate_norms=norms)


@dataclass
class ThresholdResult:
    eps0: float
    eps_fail: float
    reports: list


def find_contraction_threshold(metric, grid: GridSpec, data: InitialDataSpec, cfg: SolverConfig,
                               eps_lo: float, eps_hi: float, steps: int = 8, k_max: int = 4,
                               T: float | None = None) -> ThresholdResult:
    """Geometric bisection for the largest eps whose factors all stay <= 1/2."""
    reports = []

    def ok(eps):
        rep = picard_iterate(metric, grid, replace(data, eps=eps), cfg, k_max, T)
        reports.append(rep)
        return rep.contracting

    if not ok(eps_lo):
        raise ValueError(f"eps_lo={eps_lo} does not contract")
    if ok(eps_hi):
        return ThresholdResult(eps_hi, math.inf, reports)
    lo, hi = eps_lo, eps_hi
    for _ in range(steps):
        mid = math.sqrt(lo * hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return ThresholdResult(lo, hi, reports)


# --- damping conversion ------------------------------------------------------


def mu_conversion_time(mu: float, gamma: float, target: float) -> float:
    """Smallest T >= 0 with |mu| / (1+T)^gamma <= target."""
    if not target > 0:
        raise ValueError("target must be positive")
    if not 0 < gamma < 1:
        raise ValueError("gamma must lie in (0, 1)")
    if mu == 0:
        return 0.0
    return max(0.0, (abs(mu) / target) ** (1.0 / gamma) - 1.0)


def converted_damping(mu: float, gamma: float, t) -> np.ndarray:
    """Time-dependent coefficient mu / (1+t)^gamma left over after the conversion."""
    return mu / (1.0 + np.asarray(t, dtype=float)) ** gamma


# --- dichotomy ------------------------------------------------------------------


@dataclass
class DichotomyResult:
    verdict: str
    outcome: Outcome
    report: EnergyReport
    eps: float
    le2: float
    le2_over_eps: Optional[float]
    data_info: dict

    @property
    def blowup_time(self):
        return self.outcome.blowup_time


def dichotomy_run(metric, grid: GridSpec, cfg: SolverConfig, data: InitialDataSpec,
                  partition: DyadicPartition | None = None) -> DichotomyResult:
    """Full nonlinear run with norms attached.

    Verdicts: "global-until-horizon", "blowup", or "inconclusive" when the
    run had to stop before the boundary could reflect.
    """
    if not cfg.beta > 1:
        raise ValueError("beta must exceed 1 (scattering damping)")
    op = WaveOperator(grid, metric)
    state, info = make_initial_data(data, grid, cfg.p)
    out = run(replace(cfg, boundary_guard=True), metric, grid, state, op)
    report = energy_report(out.trajectory, op, m_le=2, partition=partition, cadence=cfg.cadence)
    if out.status == "blowup":
        verdict = "blowup"
    elif out.boundary_limited:
        verdict = "inconclusive"
    else:
        verdict = "global-until-horizon"
    le2 = report.final_le
    ratio = le2 / data.eps if data.eps > 0 else None
    report.measured.update({"LE2": le2, "LE2_over_eps": ratio})
    return DichotomyResult(verdict, out, report, data.eps, le2, ratio, info)


# --- lifespan sweep -----------------------------------------------------------


@dataclass
class LifespanRecord:
    eps: float
    p: float
    outcome: str
    T_star: Optional[float]
    diagnostics: dict = field(default_factory=dict)

    @property
    def censored(self) -> bool:
        return self.outcome != "blowup"


@dataclass
class LifespanFit:
    defined: bool
    slope: float = math.nan
    intercept: float = math.nan
    r2: float = math.nan
    points: int = 0


@dataclass
class SweepResult:
    records: list
    fit: LifespanFit
    closed_form_slope: Optional[float] = None

    @property
    def uncensored(self):
        return [r for r in self.records if not r.censored]

    @property
    def censored(self):
        return [r for r in self.records if r.censored]

    @property
    def monotone(self) -> bool:
        """Blow-up times grow as eps shrinks (over the uncensored points)."""
        pts = sorted(((r.eps, r.T_star) for r in self.uncensored), reverse=True)
        return all(b[1] > a[1] for a, b in zip(pts, pts[1:]))


def fit_lifespan(eps, T, p: float) -> LifespanFit:
    """Least squares of ln T against eps^(1-p)."""
    eps = np.asarray(eps, dtype=float)
    T = np.asarray(T, dtype=float)
    if eps.size < 3:
        return LifespanFit(False, points=int(eps.size))
    x = eps ** (1.0 - p)
    res = stats.linregress(x, np.log(T))
    return LifespanFit(True, float(res.slope), float(res.intercept), float(res.rvalue ** 2), int(eps.size))


def surrogate_blowup(eps: float, p: float, mu: float, beta: float, horizon: float,
                     dt: float = 1e-3) -> LifespanRecord:
    """Solver run on spatially constant data v0 = eps (the Laplacian term vanishes)."""
    grid = GridSpec("radial", 1.0, 16, 3)
    cfg = SolverConfig(p=p, mu=mu, beta=beta, horizon=horizon, dt_max=dt, boundary_guard=False,
                       cadence=1.0)
    data = GridState(0.0, np.zeros(grid.shape), np.full(grid.shape, eps))
    out = run(cfg, MetricSpec(n=3), grid, data)
    outcome = "blowup" if out.status == "blowup" else "global-until-horizon"
    return LifespanRecord(eps, p, outcome, out.blowup_time, {"dt": out.dt, "steps": out.steps})


def lifespan_sweep(metric, grid: GridSpec, cfg: SolverConfig, data: InitialDataSpec, eps_list,
                   surrogate: bool = False, workers: int = 1, surrogate_dt: float = 1e-3) -> SweepResult:
    """Run every eps to blow-up or horizon and fit ln T_eps against eps^(1-p).

    Points that reach the horizon (or the boundary-safe time) are censored:
    reported, never extrapolated, and left out of the fit.
    """
    eps_list = [float(e) for e in eps_list]

    def one(eps):
        if surrogate:
            return surrogate_blowup(eps, cfg.p, cfg.mu, cfg.beta, cfg.horizon, surrogate_dt)
        res = dichotomy_run(metric, grid, cfg, replace(data, eps=eps))
        outcome = "blowup" if res.verdict == "blowup" else res.verdict
        return LifespanRecord(eps, cfg.p, outcome, res.blowup_time,
                              {"sup_v0": res.data_info["sup_v0"], "steps": res.outcome.steps,
                               "boundary_limited": res.outcome.boundary_limited})

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(one, eps_list))
    else:
        records = [one(e) for e in eps_list]
    unc = [r for r in records if not r.censored]
    fit = fit_lifespan([r.eps for r in unc], [r.T_star for r in unc], cfg.p)
    closed = None
    if surrogate and cfg.mu == 0:
        exact = [ode_oracle_blowup(cfg.p, 0.0, cfg.beta, r.eps) for r in unc]
        cf = fit_lifespan([r.eps for r in unc], exact, cfg.p)
        closed = cf.slope if cf.defined else None
    return SweepResult(records, fit, closed)


# --- manufactured solutions ----------------------------------------------------

MMS_TARGETS = ("flat_wave", "damped_gaussian", "nonlinear_damped_gaussian")


def mms_config(name: str, base: SolverConfig | None = None) -> SolverConfig:
    """Equation parameters for each shipped target (horizon and cfl kept from ``base``)."""
    base = SolverConfig() if base is None else base
    if name == "flat_wave":
        return replace(base, mu=0.0, nonlinearity_on=False, boundary_guard=False)
    if name == "damped_gaussian":
        return replace(base, mu=1.0, beta=2.0, nonlinearity_on=False, boundary_guard=False)
    if name == "nonlinear_damped_gaussian":
        return replace(base, mu=1.0, beta=2.0, p=2.0, nonlinearity_on=True, boundary_guard=False)
    raise ValueError(f"unknown manufactured target {name!r}; expected one of {MMS_TARGETS}")


@dataclass
class MMSResult:
    target: str
    spacings: list
    errors: list
    seconds: list

    @property
    def ratios(self) -> list:
        return [a / b for a, b in zip(self.errors, self.errors[1:])]

    def passed(self, lo: float = 3.5, hi: float = 4.5) -> bool:
        return bool(self.ratios) and all(lo <= r <= hi for r in self.ratios)


def mms_convergence(name: str, metric, grid: GridSpec, base: SolverConfig | None = None,
                    levels: int = 2) -> MMSResult:
    """Forced runs against a closed-form target on ``levels`` grids, each halving h.

    dt follows h through the cfl number, and the error is the mass-weighted L2
    distance to the target at the horizon.
    """
    import time

    cfg0 = mms_config(name, base)
    spacings, errors, seconds = [], [], []
    g = grid
    for _ in range(levels):
        t0 = time.perf_counter()
        op = WaveOperator(g, metric)
        target = flat_wave_target(g) if name == "flat_wave" else damped_gaussian_target(g)
        cfg = replace(cfg0, forcing=manufactured_forcing(target, cfg0, metric, g, op))
        out = run(cfg, metric, g, target.state(g, 0.0), op)
        if out.status == "blowup":
            raise SolverInstabilityError(f"manufactured run {name!r} blew up")
        fin = out.final
        diff = fin.u - target.state(g, fin.t).u
        errors.append(math.sqrt(float(np.sum(op.mass * diff * diff))))
        spacings.append(g.h)
        seconds.append(time.perf_counter() - t0)
        g = g.refined()
    return MMSResult(name, spacings, errors, seconds)
