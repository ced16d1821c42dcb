"""Asymptotically Euclidean metric family, decay checks and geodesic probes.

The shipped family is conformally flat,

    g_jk(x) = a(x) delta_jk,
    a(x) = 1 + delta1 <x>^(-rho1) + delta2 exp(-|x - center2|^2),

with <x> = sqrt(1 + |x|^2).  The first perturbation is radial with power decay
rho1; the second is a Gaussian bump (it decays faster than any power, so it
satisfies the rho2 bound for every rho2).  Keeping |delta1| + |delta2| < 1 makes
a(x) > 0 everywhere, hence g is positive definite globally.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field

import numpy as np


class RejectedSpecError(ValueError):
    """Metric parameters outside the admissible family."""


@dataclass(frozen=True)
class MetricSpec:
    rho1: float = 1.0
    rho2: float = 2.0
    delta1: float = 0.0
    delta2: float = 0.0
    center2: tuple[float, ...] | None = None
    n: int = 3

    def __post_init__(self):
        if self.center2 is None:
            object.__setattr__(self, "center2", (0.0,) * int(self.n))
        else:
            object.__setattr__(self, "center2", tuple(float(c) for c in self.center2))
        errors = self.violations()
        if errors:
            raise RejectedSpecError("; ".join(errors))

    def violations(self) -> list[str]:
        errors = []
        if self.n not in (2, 3, 4):
            errors.append(f"n must be 2, 3 or 4 (got {self.n})")
        if not self.rho1 > 0:
            errors.append("rho1 must be positive")
        if not self.rho2 > 1:
            errors.append("rho2 must exceed 1")
        if not self.rho1 < self.rho2:
            errors.append("rho1 must be smaller than rho2")
        if not abs(self.delta1) + abs(self.delta2) < 1:
            errors.append("|delta1| + |delta2| must be below 1 (positive definiteness)")
        if len(self.center2) != self.n:
            errors.append(f"center2 must have {self.n} coordinates")
        if not all(math.isfinite(c) for c in self.center2):
            errors.append("center2 must be finite")
        return errors

    @property
    def rho(self) -> float:
        return min(self.rho1, self.rho2 - 1.0)

    @property
    def is_flat(self) -> bool:
        return self.delta1 == 0.0 and self.delta2 == 0.0

    @property
    def is_radial(self) -> bool:
        return self.delta2 == 0.0 or not any(self.center2)


def _japanese(x):
    return np.sqrt(1.0 + np.sum(x * x, axis=-1))


def radial_part(spec: MetricSpec, x) -> np.ndarray:
    """g_1 diagonal entry: delta1 <x>^(-rho1)."""
    x = np.asarray(x, dtype=float)
    return spec.delta1 * _japanese(x) ** (-spec.rho1)


def bump_part(spec: MetricSpec, x) -> np.ndarray:
    """g_2 diagonal entry: delta2 exp(-|x - center2|^2)."""
    x = np.asarray(x, dtype=float)
    d = x - np.asarray(spec.center2)
    return spec.delta2 * np.exp(-np.sum(d * d, axis=-1))


def conformal_factor(spec: MetricSpec, x) -> np.ndarray:
    return 1.0 + radial_part(spec, x) + bump_part(spec, x)


def conformal_factor_radial(spec: MetricSpec, r) -> np.ndarray:
    """a(r) for radially symmetric specs, evaluated from the radius alone."""
    if not spec.is_radial:
        raise RejectedSpecError("g_2 bump is off-centre; the metric is not radial")
    r = np.asarray(r, dtype=float)
    a = 1.0 + spec.delta1 * (1.0 + r * r) ** (-0.5 * spec.rho1)
    if spec.delta2:
        a = a + spec.delta2 * np.exp(-r * r)
    return a


def conformal_gradient(spec: MetricSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    jx = _japanese(x)[..., None]
    grad = -spec.delta1 * spec.rho1 * jx ** (-spec.rho1 - 2.0) * x
    if spec.delta2:
        d = x - np.asarray(spec.center2)
        grad = grad - 2.0 * spec.delta2 * np.exp(-np.sum(d * d, axis=-1))[..., None] * d
    return grad


@dataclass(frozen=True)
class MetricField:
    """Evaluates g_jk, g^jk and sqrt|g| for a spec at arbitrary points.

    Points are arrays of shape (..., n).  Matrices come back with shape
    (..., n, n).
    """

    spec: MetricSpec

    @property
    def n(self) -> int:
        return self.spec.n

    def factor(self, x) -> np.ndarray:
        return conformal_factor(self.spec, x)

    def metric(self, x) -> np.ndarray:
        a = self.factor(x)
        return a[..., None, None] * np.eye(self.n)

    def inverse(self, x) -> np.ndarray:
        a = self.factor(x)
        return (1.0 / a)[..., None, None] * np.eye(self.n)

    def volume(self, x) -> np.ndarray:
        return self.factor(x) ** (0.5 * self.n)

    def max_speed(self, x) -> float:
        """sup over the points of sqrt(largest eigenvalue of g^jk)."""
        return float(np.max(self.factor(x) ** -0.5))


def inverse_metric_at(spec: MetricSpec, x) -> tuple[np.ndarray, float]:
    """Return (g^jk, sqrt|g|) at a single point ``x``."""
    x = np.asarray(x, dtype=float)
    if x.shape != (spec.n,):
        raise ValueError(f"point must have shape ({spec.n},), got {x.shape}")
    a = float(conformal_factor(spec, x))
    if not a > 0:
        raise RejectedSpecError("assembled metric is not positive definite")
    return np.eye(spec.n) / a, a ** (0.5 * spec.n)


# --- decay check -----------------------------------------------------------


def multi_indices(n: int, order: int) -> list[tuple[int, ...]]:
    """Unordered multi-indices over n coordinates, as sorted axis tuples."""
    return list(itertools.combinations_with_replacement(range(n), order))


def _fd_derivative(f, x, axes: tuple[int, ...], h):
    """Centered finite difference of f along ``axes`` at points x (m, n)."""
    if not axes:
        return f(x)
    n = x.shape[-1]
    if len(axes) == 1:
        e = np.zeros(n)
        e[axes[0]] = 1.0
        step = h[:, None] * e
        return (f(x + step) - f(x - step)) / (2.0 * h)
    i, j = axes
    ei = np.zeros(n)
    ej = np.zeros(n)
    ei[i] = 1.0
    ej[j] = 1.0
    if i == j:
        step = h[:, None] * ei
        return (f(x + step) - 2.0 * f(x) + f(x - step)) / (h * h)
    si = h[:, None] * ei
    sj = h[:, None] * ej
    return (f(x + si + sj) - f(x + si - sj) - f(x - si + sj) + f(x - si - sj)) / (4.0 * h * h)


@dataclass
class DecayReport:
    """Weighted sups sup_x |d^a g_i(x)| <x>^(|a| + rho_i).

    ``sups`` and ``sups_doubled`` are keyed by (i, axes), i in {1, 2}; the
    doubled values use the sample set extended by 2x-scaled copies.
    """

    max_order: int
    sups: dict = field(default_factory=dict)
    sups_doubled: dict = field(default_factory=dict)
    argmax: dict = field(default_factory=dict)
    tolerance: float = 0.01

    def stable(self, key) -> bool:
        s1, s2 = self.sups[key], self.sups_doubled[key]
        if not (math.isfinite(s1) and math.isfinite(s2)):
            return False
        scale = max(abs(s1), abs(s2))
        return scale == 0.0 or abs(s2 - s1) <= self.tolerance * scale

    @property
    def passed(self) -> bool:
        return all(self.stable(k) for k in self.sups)

    def order_sup(self, i: int, order: int) -> float:
        vals = [v for (ii, axes), v in self.sups.items() if ii == i and len(axes) == order]
        return max(vals) if vals else 0.0

    def rows(self):
        for (i, axes), s in sorted(self.sups.items()):
            yield {
                "component": i,
                "multi_index": "".join(str(a + 1) for a in axes) or "0",
                "order": len(axes),
                "sup": s,
                "sup_doubled": self.sups_doubled[(i, axes)],
                "stable": self.stable((i, axes)),
            }


def check_decay(spec: MetricSpec, max_order: int = 2, samples=None) -> DecayReport:
    """Measure the decay of g_1, g_2 and their derivatives up to ``max_order``.

    Derivatives use centered differences with relative step 1e-3 <x>.
    """
    if max_order not in (0, 1, 2):
        raise ValueError("max_order must be 0, 1 or 2")
    if samples is None:
        samples = default_decay_samples(spec.n)
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.size == 0 or samples.shape[-1] != spec.n:
        raise ValueError("samples must be a nonempty (m, n) point set")
    if not np.all(np.isfinite(samples)):
        raise ValueError("samples must have finite coordinates")
    doubled = np.concatenate([samples, 2.0 * samples])

    parts = {1: (lambda y: radial_part(spec, y), spec.rho1),
             2: (lambda y: bump_part(spec, y), spec.rho2)}
    report = DecayReport(max_order=max_order)
    for i, (f, rho) in parts.items():
        for order in range(max_order + 1):
            for axes in multi_indices(spec.n, order):
                for pts, target in ((samples, report.sups), (doubled, report.sups_doubled)):
                    jx = _japanese(pts)
                    vals = np.abs(_fd_derivative(f, pts, axes, 1e-3 * jx)) * jx ** (order + rho)
                    k = int(np.argmax(vals))
                    target[(i, axes)] = float(vals[k])
                    if target is report.sups:
                        report.argmax[(i, axes)] = pts[k].copy()
    return report


def default_decay_samples(n: int, radii=None, directions: int = 24, seed: int = 0) -> np.ndarray:
    """Points on dyadic radii {0, 1, 2, ..., 64} along fixed random directions."""
    if radii is None:
        radii = [0.0] + [2.0 ** k for k in range(7)]
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(directions, n))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    dirs = np.concatenate([np.eye(n), dirs])
    return np.concatenate([r * dirs for r in radii])


# --- geodesics ---------------------------------------------------------------


def hamiltonian(spec: MetricSpec, x, xi) -> np.ndarray:
    """H(x, xi) = 1/2 g^jk(x) xi_j xi_k."""
    xi = np.asarray(xi, dtype=float)
    return 0.5 * np.sum(xi * xi, axis=-1) / conformal_factor(spec, x)


def _hamilton_rhs(spec, x, xi):
    a = conformal_factor(spec, x)[:, None]
    dx = xi / a
    dxi = 0.5 * np.sum(xi * xi, axis=-1)[:, None] * conformal_gradient(spec, x) / (a * a)
    return dx, dxi


def _rk4(spec, x, xi, dt):
    k1x, k1p = _hamilton_rhs(spec, x, xi)
    k2x, k2p = _hamilton_rhs(spec, x + 0.5 * dt * k1x, xi + 0.5 * dt * k1p)
    k3x, k3p = _hamilton_rhs(spec, x + 0.5 * dt * k2x, xi + 0.5 * dt * k2p)
    k4x, k4p = _hamilton_rhs(spec, x + dt * k3x, xi + dt * k3p)
    return (x + dt / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x),
            xi + dt / 6.0 * (k1p + 2 * k2p + 2 * k3p + k4p))


def trace_ray(spec: MetricSpec, x0, xi0, t_end: float, dt: float = 0.01):
    """Integrate one bicharacteristic; returns (times, x, xi) sampled every step."""
    x = np.asarray(x0, dtype=float)[None, :]
    xi = np.asarray(xi0, dtype=float)[None, :]
    nsteps = int(round(t_end / dt))
    xs, xis = [x[0].copy()], [xi[0].copy()]
    for _ in range(nsteps):
        x, xi = _rk4(spec, x, xi, dt)
        xs.append(x[0].copy())
        xis.append(xi[0].copy())
    return np.arange(nsteps + 1) * dt, np.array(xs), np.array(xis)


@dataclass
class NontrappingReport:
    ray_count: int
    escaped: np.ndarray
    escape_time: np.ndarray
    final_radius: np.ndarray
    inconclusive: np.ndarray
    h_drift: np.ndarray

    @property
    def escape_fraction(self) -> float:
        return float(np.mean(self.escaped)) if self.ray_count else 0.0

    @property
    def max_escape_time(self) -> float:
        t = self.escape_time[self.escaped]
        return float(t.max()) if t.size else math.nan

    @property
    def max_h_drift(self) -> float:
        d = self.h_drift[~self.inconclusive]
        return float(d.max()) if d.size else math.nan

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "escaped", "escape_time", "final_radius"])
            for k in range(self.ray_count):
                t = self.escape_time[k]
                w.writerow([k, int(self.escaped[k]), "" if math.isnan(t) else repr(float(t)),
                            repr(float(self.final_radius[k]))])


def random_rays(n: int, count: int, r_max: float = 5.0, seed: int = 0):
    """Launch points uniform in the ball |x| <= r_max with random unit covectors."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(count, n))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    x *= r_max * rng.random(count)[:, None] ** (1.0 / n)
    xi = rng.normal(size=(count, n))
    xi /= np.linalg.norm(xi, axis=1, keepdims=True)
    return x, xi


def trace_geodesics(spec: MetricSpec, rays, t_max: float = 200.0, r_escape: float = 50.0,
                    dt: float = 0.01) -> NontrappingReport:
    """Probe nontrapping by following the Hamiltonian flow of 1/2 g^jk xi_j xi_k.

    ``rays`` is either a pair of arrays (x0, xi0) of shape (k, n) or an iterable
    of (x0, xi0) pairs.  A ray escapes once |x| exceeds ``r_escape`` before
    ``t_max``.  Rays whose state turns non-finite are flagged inconclusive.
    """
    if t_max <= 0 or r_escape <= 0 or dt <= 0:
        raise ValueError("t_max, r_escape and dt must be positive")
    x0, xi0 = _as_ray_arrays(rays, spec.n)
    if np.any(np.linalg.norm(xi0, axis=1) == 0):
        raise ValueError("initial covectors must be nonzero")
    k = x0.shape[0]
    x, xi = x0.copy(), xi0.copy()
    h0 = hamiltonian(spec, x0, xi0)
    escaped = np.linalg.norm(x0, axis=1) > r_escape
    escape_time = np.where(escaped, 0.0, np.nan)
    inconclusive = np.zeros(k, dtype=bool)
    h_drift = np.zeros(k)
    active = ~escaped
    t = 0.0
    nsteps = int(math.ceil(t_max / dt))
    for _ in range(nsteps):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        xn, xin = _rk4(spec, x[idx], xi[idx], dt)
        t += dt
        x[idx], xi[idx] = xn, xin
        bad = ~np.all(np.isfinite(xn), axis=1) | ~np.all(np.isfinite(xin), axis=1)
        inconclusive[idx[bad]] = True
        out = ~bad & (np.linalg.norm(xn, axis=1) > r_escape)
        escaped[idx[out]] = True
        escape_time[idx[out]] = t
        active[idx[bad | out]] = False
    ok = ~inconclusive
    h_drift[ok] = np.abs(hamiltonian(spec, x[ok], xi[ok]) - h0[ok]) / h0[ok]
    h_drift[inconclusive] = np.nan
    return NontrappingReport(
        ray_count=k,
        escaped=escaped & ok,
        escape_time=escape_time,
        final_radius=np.linalg.norm(x, axis=1),
        inconclusive=inconclusive,
        h_drift=h_drift,
    )


def _as_ray_arrays(rays, n):
    if isinstance(rays, tuple) and len(rays) == 2 and np.ndim(rays[0]) == 2:
        x0, xi0 = rays
    else:
        rays = list(rays)
        x0 = [r[0] for r in rays]
        xi0 = [r[1] for r in rays]
    x0 = np.asarray(x0, dtype=float).reshape(-1, n)
    xi0 = np.asarray(xi0, dtype=float).reshape(-1, n)
    if x0.shape != xi0.shape:
        raise ValueError("positions and covectors must pair up")
    return x0, xi0
