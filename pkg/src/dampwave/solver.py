"""Time integration of u_tt - Lap_g u + mu u_t / (1+t)^beta = |u_t|^p (+ F).

Space: second-order divergence-form finite volumes.  With mass weights
M = cell volume * sqrt|g| and a symmetric stiffness K (face fluxes
g^jj sqrt|g| times differences), Lap_g = -M^-1 K and the discrete energy

    E^2 = 1/2 <v, v>_M + 1/2 <K u, u>

satisfies the same identity as its continuous counterpart.

Time: implicit midpoint on the first-order system (u, v).  It is symmetric
and second order, and it keeps the discrete energy identity exact step by
step, so an undamped, unforced linear run conserves E^2 to roundoff.  The
damping coefficient is frozen at the half-step time, and the power
nonlinearity is resolved by fixed-point iteration on the midpoint velocity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.integrate
import scipy.linalg
import scipy.optimize
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import ContractViolation, GridSpec, GridState, sphere_area
from .metric import MetricField, MetricSpec, conformal_factor, conformal_factor_radial


@dataclass(frozen=True)
class SolverConfig:
    p: float = 2.0
    mu: float = 0.0
    beta: float = 2.0
    cfl: float = 0.5
    blowup_threshold: float = 1e6
    horizon: float = 1.0
    nonlinearity_on: bool = True
    forcing: Optional[Callable[[float], np.ndarray]] = field(default=None, compare=False)
    cadence: float = 10.0
    dt_max: Optional[float] = None
    boundary_guard: bool = True
    fixed_point_tol: float = 1e-13
    fixed_point_iters: int = 50

    def __post_init__(self):
        errors = self.violations()
        if errors:
            raise ValueError("; ".join(errors))

    def violations(self) -> list[str]:
        errors = []
        if not self.p > 1:
            errors.append("p must exceed 1")
        if not 0 < self.cfl <= 1:
            errors.append("cfl must lie in (0, 1]")
        if not self.horizon > 0:
            errors.append("horizon must be positive")
        if not self.blowup_threshold > 0:
            errors.append("blowup_threshold must be positive")
        if not self.cadence > 0:
            errors.append("cadence must be positive")
        if self.dt_max is not None and not self.dt_max > 0:
            errors.append("dt_max must be positive")
        return errors

    def damping(self, t: float) -> float:
        return self.mu / (1.0 + t) ** self.beta


def power_nonlinearity(v: np.ndarray, p: float) -> np.ndarray:
    """|v|^p as exp(p log|v|), with |v| < 1e-300 mapped to zero."""
    a = np.abs(v)
    out = np.zeros_like(a)
    big = a >= 1e-300
    out[big] = np.exp(p * np.log(a[big]))
    return out


class WaveOperator:
    """Discrete Laplace-Beltrami operator of a metric on a grid.

    Holds the mass weights, the stiffness matrix and the maximal wave speed;
    the boundary is zero-flux (or periodic), which keeps K symmetric.
    """

    def __init__(self, grid: GridSpec, metric: MetricField | MetricSpec):
        if isinstance(metric, MetricSpec):
            metric = MetricField(metric)
        if grid.is_radial:
            if metric.n != grid.n:
                raise ContractViolation(f"metric dimension {metric.n} != grid dimension {grid.n}")
            if not metric.spec.is_radial:
                raise ContractViolation("radial grids need a radially symmetric metric")
        elif metric.n != 3:
            raise ContractViolation("cartesian3d grids need a 3-dimensional metric")
        self.grid = grid
        self.metric = metric
        self.n = grid.n
        self.h = grid.h
        if grid.is_radial:
            self._build_radial()
        else:
            self._build_cartesian()

    def _build_radial(self):
        g, n, h = self.grid, self.n, self.h
        r = g.axis()
        spec = self.metric.spec
        a = conformal_factor_radial(spec, r)
        rf = r[:-1] + 0.5 * h
        af = conformal_factor_radial(spec, rf)
        self.factor = a
        self.mass = g.cell_volumes() * a ** (0.5 * n)
        self.kappa = sphere_area(n) * rf ** (n - 1) * af ** (0.5 * n - 1.0) / h
        self.max_speed = float(max(np.max(a ** -0.5), np.max(af ** -0.5)))
        self._K = None

    def _build_cartesian(self):
        g, h = self.grid, self.h
        N = g.points
        x = g.axis()
        spec = self.metric.spec
        pts = g.points_array()
        a = conformal_factor(spec, pts)
        self.factor = a
        self.mass = g.cell_volumes() * a ** 1.5
        w = g.axis_weights()
        if g.periodic:
            d1 = sp.diags([-np.ones(N), np.ones(N - 1)], [0, 1], shape=(N, N), format="lil")
            d1[N - 1, 0] = 1.0
            d1 = d1.tocsr()
            xf = x + 0.5 * h
        else:
            d1 = sp.diags([-np.ones(N - 1), np.ones(N - 1)], [0, 1], shape=(N - 1, N), format="csr")
            xf = x[:-1] + 0.5 * h
        eye = sp.identity(N, format="csr")
        K = None
        speeds = [np.max(a ** -0.5)]
        for d in range(3):
            axes = [x, x, x]
            axes[d] = xf
            fp = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
            af = conformal_factor(spec, fp)
            speeds.append(np.max(af ** -0.5))
            wt = [w, w, w]
            wt[d] = np.ones(len(xf))
            coef = (wt[0][:, None, None] * wt[1][None, :, None] * wt[2][None, None, :]) * af ** 0.5 / h
            ops = [eye, eye, eye]
            ops[d] = d1
            D = sp.kron(sp.kron(ops[0], ops[1]), ops[2], format="csr")
            Kd = D.T @ sp.diags(coef.ravel()) @ D
            K = Kd if K is None else K + Kd
        self._K = K.tocsr()
        self.max_speed = float(max(speeds))

    # -- operator actions ---------------------------------------------------

    def _check(self, u):
        if np.shape(u) != self.grid.shape:
            raise ContractViolation(f"array shape {np.shape(u)} does not match grid {self.grid.shape}")

    def stiffness(self, u: np.ndarray) -> np.ndarray:
        """K u, with <K u, u> = sum of g^jj sqrt|g| |D_j u|^2 over faces."""
        self._check(u)
        if self.grid.is_radial:
            flux = self.kappa * np.diff(u)
            ku = np.zeros_like(u, dtype=float)
            ku[:-1] -= flux
            ku[1:] += flux
            return ku
        return (self._K @ np.ravel(u)).reshape(self.grid.shape)

    def laplacian(self, u: np.ndarray) -> np.ndarray:
        return -self.stiffness(u) / self.mass

    def potential(self, u: np.ndarray) -> float:
        """<K u, u> evaluated as a sum of squares (never negative)."""
        self._check(u)
        if self.grid.is_radial:
            return float(np.sum(self.kappa * np.diff(u) ** 2))
        return float(max(np.vdot(np.ravel(u), self._K @ np.ravel(u)), 0.0))

    def energy_squared(self, u: np.ndarray, v: np.ndarray) -> float:
        return 0.5 * float(np.sum(self.mass * v * v)) + 0.5 * self.potential(u)

    def solve_shifted(self, c: float, s: float, rhs: np.ndarray, x0=None) -> np.ndarray:
        """Solve (c M + s K) x = rhs."""
        if self.grid.is_radial:
            N = self.grid.points
            ab = np.zeros((3, N))
            diag = c * self.mass
            diag[:-1] += s * self.kappa
            diag[1:] += s * self.kappa
            ab[1] = diag
            ab[0, 1:] = -s * self.kappa
            ab[2, :-1] = -s * self.kappa
            return scipy.linalg.solve_banded((1, 1), ab, rhs, check_finite=False)
        A = s * self._K + sp.diags(c * self.mass.ravel())
        dinv = 1.0 / A.diagonal()
        pre = spla.LinearOperator(A.shape, matvec=lambda y: dinv * y)
        b = np.ravel(rhs)
        guess = None if x0 is None else np.ravel(x0)
        x, info = spla.cg(A, b, x0=guess, rtol=1e-13, atol=0.0, maxiter=2000, M=pre)
        if info > 0:
            # fall back to the iterate; non-convergence only happens near blow-up
            pass
        return x.reshape(self.grid.shape)

    def time_step(self, cfl: float, dt_max: float | None = None) -> float:
        dt = cfl * self.h / self.max_speed
        if dt_max is not None:
            dt = min(dt, dt_max)
        return dt


def laplace_beltrami_apply(metric: MetricField | MetricSpec, grid: GridSpec, u: np.ndarray,
                           op: WaveOperator | None = None) -> np.ndarray:
    """Divergence-form discretization of (1/sqrt|g|) d_i (g^ij sqrt|g| d_j u)."""
    if op is None:
        op = WaveOperator(grid, metric)
    return op.laplacian(np.asarray(u, dtype=float))


def _blown(v, threshold) -> bool:
    if not np.all(np.isfinite(v)):
        return True
    return bool(np.max(np.abs(v)) > threshold)


def step(state: GridState, cfg: SolverConfig, op: WaveOperator, dt: float) -> GridState:
    """Advance (u, v) by one implicit-midpoint step of size dt.

    The returned state carries blown_up=True if it is non-finite or its
    velocity exceeds ``cfg.blowup_threshold``.
    """
    state.check(op.grid)
    u, v = state.u, state.v
    th = state.t + 0.5 * dt
    damp = cfg.damping(th)
    c = 2.0 + dt * damp
    s = 0.5 * dt * dt
    base = 2.0 * op.mass * v - dt * op.stiffness(u)
    src = None
    if cfg.forcing is not None:
        src = np.asarray(cfg.forcing(th), dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        vbar = None
        guess = v
        iters = cfg.fixed_point_iters if cfg.nonlinearity_on else 1
        for _ in range(iters):
            extra = np.zeros_like(v) if src is None else src.copy()
            if cfg.nonlinearity_on:
                extra = extra + power_nonlinearity(guess, cfg.p)
            rhs = base + dt * op.mass * extra
            vbar = op.solve_shifted(c, s, rhs, x0=guess)
            if not cfg.nonlinearity_on:
                break
            if not np.all(np.isfinite(vbar)):
                break
            change = np.max(np.abs(vbar - guess))
            scale = max(np.max(np.abs(vbar)), 1e-300)
            guess = vbar
            if change <= cfg.fixed_point_tol * scale:
                break
            if scale > cfg.blowup_threshold * 1e3:
                break
        u_new = u + dt * vbar
        v_new = 2.0 * vbar - v
    blown = _blown(v_new, cfg.blowup_threshold) or not np.all(np.isfinite(u_new))
    return GridState(state.t + dt, u_new, v_new, blown_up=blown)


@dataclass
class Outcome:
    status: str
    blowup_time: Optional[float]
    trajectory: list
    dt: float
    steps: int
    boundary_limited: bool = False
    warning: Optional[str] = None
    safe_time: float = math.inf
    all_states: Optional[list] = None

    @property
    def final(self) -> GridState:
        return self.trajectory[-1]

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.trajectory])


def support_mask(state: GridState, rel_tol: float = 1e-14) -> np.ndarray:
    scale = max(float(np.max(np.abs(state.u))), float(np.max(np.abs(state.v))))
    if scale == 0.0:
        return np.zeros(state.u.shape, dtype=bool)
    return (np.abs(state.u) > rel_tol * scale) | (np.abs(state.v) > rel_tol * scale)


def run(cfg: SolverConfig, metric: MetricField | MetricSpec, grid: GridSpec, data: GridState,
        op: WaveOperator | None = None, keep_all: bool = False) -> Outcome:
    """Integrate from ``data`` up to ``data.t + cfg.horizon``.

    With ``cfg.boundary_guard`` the run stops early (status completed,
    boundary_limited=True) before the domain of influence of the data reaches
    the outer boundary.  Samples are kept every 1/cadence time units;
    ``keep_all`` also stores every step (needed for Duhamel-type sources).
    """
    if op is None:
        op = WaveOperator(grid, metric)
    data.check(grid)
    if not data.finite:
        raise ValueError("initial data must be finite")
    dt = op.time_step(cfg.cfl, cfg.dt_max)
    nsteps = int(math.ceil(cfg.horizon / dt - 1e-9))
    dt = cfg.horizon / nsteps

    safe_time = math.inf
    warning = None
    if cfg.boundary_guard and not grid.periodic:
        margin = 2.0 * grid.h
        dist = grid.distance_to_boundary(support_mask(data))
        safe_time = max(dist - margin, 0.0) / op.max_speed
        if cfg.horizon > safe_time:
            warning = (f"horizon {cfg.horizon:g} exceeds boundary-safe time {safe_time:g}; "
                       "run will stop before reflections")

    sample_every = max(1, int(round(1.0 / (cfg.cadence * dt))))
    traj = [data]
    every = [data] if keep_all else None
    state = data
    status, t_star, limited = "completed", None, False
    k = 0
    for k in range(1, nsteps + 1):
        if (k * dt) > safe_time:
            limited = True
            k -= 1
            break
        new = step(state, cfg, op, dt)
        if new.blown_up:
            status, t_star = "blowup", state.t + 0.5 * dt
            traj.append(new)
            break
        state = new
        if keep_all:
            every.append(state)
        if k % sample_every == 0 or k == nsteps:
            traj.append(state)
    if limited and traj[-1] is not state:
        traj.append(state)
    return Outcome(status=status, blowup_time=t_star, trajectory=traj, dt=dt, steps=k,
                   boundary_limited=limited, warning=warning, safe_time=safe_time,
                   all_states=every)


# --- ODE oracle ------------------------------------------------------------


def _damping_integral(beta: float, t):
    """int_0^t (1+s)^(-beta) ds."""
    if beta == 1.0:
        return np.log1p(t)
    return ((1.0 + np.asarray(t, dtype=float)) ** (1.0 - beta) - 1.0) / (1.0 - beta)


def ode_oracle_blowup(p: float, mu: float, beta: float, v0: float, t_cap: float = 1e8,
                      tol: float = 1e-10) -> Optional[float]:
    """Blow-up time of v' = |v|^p - mu v / (1+t)^beta, v(0) = v0 > 0.

    With w = v^(1-p) the equation becomes linear,
    w' = (p-1) (mu w / (1+t)^beta - 1), so blow-up (w = 0) happens at the T with
    int_0^T exp(-A(s)) ds = v0^(1-p) / (p-1), A(t) = (p-1) mu int_0^t (1+s)^-beta.
    For mu = 0 this is the closed form v0^(1-p) / (p-1).  Returns None if the
    root lies beyond ``t_cap``.
    """
    if not v0 > 0:
        raise ValueError("v0 must be positive")
    if not p > 1:
        raise ValueError("p must exceed 1")
    target = v0 ** (1.0 - p) / (p - 1.0)
    if mu == 0.0:
        return target if target <= t_cap else None

    def weight(s):
        return math.exp(-(p - 1.0) * mu * float(_damping_integral(beta, s)))

    def piece(a, b):
        val, _ = scipy.integrate.quad(weight, a, b, epsabs=tol * 1e-3, epsrel=tol, limit=500)
        return val

    # accumulate over doubling segments so each quadrature sees a short interval
    lo, acc = 0.0, 0.0
    hi = max(target, 1e-6)
    while True:
        seg = piece(lo, hi)
        if acc + seg >= target:
            break
        if hi >= t_cap:
            return None
        lo, acc = hi, acc + seg
        hi = min(2.0 * hi, t_cap)
    return scipy.optimize.brentq(lambda T: acc + piece(lo, T) - target, lo, hi, xtol=tol * 1e-2,
                                 rtol=4 * np.finfo(float).eps, maxiter=500)


def ode_oracle_velocity(p: float, mu: float, beta: float, v0: float, t) -> np.ndarray:
    """Closed-form trajectory v(t) of the same scalar ODE (nan after blow-up)."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    w0 = v0 ** (1.0 - p)
    if mu == 0.0:
        w = w0 - (p - 1.0) * t
    else:
        A = lambda s: (p - 1.0) * mu * float(_damping_integral(beta, s))
        w = np.empty_like(t)
        for i, ti in enumerate(t):
            acc, _ = scipy.integrate.quad(lambda s: math.exp(-A(s)), 0.0, ti, epsabs=1e-14, epsrel=1e-13)
            w[i] = math.exp(A(ti)) * (w0 - (p - 1.0) * acc)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(w > 0, w ** (-1.0 / (p - 1.0)), np.nan)


# --- manufactured solutions -------------------------------------------------


@dataclass(frozen=True)
class ManufacturedTarget:
    """Closed-form u*(t, x) with its first two time derivatives.

    Each callable takes (t, coords) where coords is ``grid.coords()``.
    """

    name: str
    u: Callable
    ut: Callable
    utt: Callable
    lap: Optional[Callable] = None

    def state(self, grid: GridSpec, t: float = 0.0) -> GridState:
        c = grid.coords()
        shape = grid.shape
        return GridState(t, np.broadcast_to(self.u(t, c), shape), np.broadcast_to(self.ut(t, c), shape))


def flat_wave_target(grid: GridSpec, k: float = 1.0) -> ManufacturedTarget:
    """sin(k x1) cos(k t) on Cartesian grids, sin(k r)/(k r) cos(k t) radially (n = 3).

    Both solve the flat, undamped wave equation exactly.
    """
    if grid.is_radial:
        def prof(c):
            r = c[0]
            return np.sinc(k * r / np.pi)

        def lap(t, c):
            return -k * k * prof(c) * np.cos(k * t)

        return ManufacturedTarget(
            "flat_wave",
            u=lambda t, c: prof(c) * np.cos(k * t),
            ut=lambda t, c: -k * prof(c) * np.sin(k * t),
            utt=lambda t, c: -k * k * prof(c) * np.cos(k * t),
            lap=lap if grid.n == 3 else None,
        )
    return ManufacturedTarget(
        "flat_wave",
        u=lambda t, c: np.sin(k * c[0]) * np.cos(k * t) + 0.0 * (c[1] + c[2]),
        ut=lambda t, c: -k * np.sin(k * c[0]) * np.sin(k * t) + 0.0 * (c[1] + c[2]),
        utt=lambda t, c: -k * k * np.sin(k * c[0]) * np.cos(k * t) + 0.0 * (c[1] + c[2]),
        lap=lambda t, c: -k * k * np.sin(k * c[0]) * np.cos(k * t) + 0.0 * (c[1] + c[2]),
    )


def damped_gaussian_target(grid: GridSpec) -> ManufacturedTarget:
    """exp(-t) exp(-|x|^2)."""
    n = grid.n

    def r2(c):
        return sum(ci * ci for ci in c)

    def g(t, c):
        return np.exp(-t) * np.exp(-r2(c))

    return ManufacturedTarget(
        "damped_gaussian",
        u=g,
        ut=lambda t, c: -g(t, c),
        utt=g,
        lap=lambda t, c: (4.0 * r2(c) - 2.0 * n) * g(t, c),
    )


def manufactured_forcing(target: ManufacturedTarget, cfg: SolverConfig, metric, grid: GridSpec,
                         op: WaveOperator | None = None, discrete: bool = True) -> Callable:
    """F(t) = u*_tt - Lap_g u* + mu u*_t / (1+t)^beta - |u*_t|^p.

    With ``discrete`` the Laplacian is the solver's own stencil, so a run
    forced by F reproduces u* up to time-integration error only.  Otherwise the
    target's analytic Laplacian is used (flat metric only).
    """
    if op is None:
        op = WaveOperator(grid, metric)
    c = grid.coords()
    shape = grid.shape
    if not discrete and target.lap is None:
        raise ValueError(f"target {target.name!r} has no analytic Laplacian")

    def forcing(t: float) -> np.ndarray:
        u = np.broadcast_to(target.u(t, c), shape)
        ut = np.broadcast_to(target.ut(t, c), shape)
        utt = np.broadcast_to(target.utt(t, c), shape)
        lap = op.laplacian(u) if discrete else np.broadcast_to(target.lap(t, c), shape)
        f = utt - lap + cfg.damping(t) * ut
        if cfg.nonlinearity_on:
            f = f - power_nonlinearity(ut, cfg.p)
        return f

    return forcing
