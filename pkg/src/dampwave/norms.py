"""Energy, higher-order energy and local-energy norms.

Vector fields are Y = (d_1, ..., d_n, Omega_ij for i < j), with
Omega_ij = x_i d_j - x_j d_i.  On Cartesian grids Y^a u is computed with
centered differences.  On radial grids it is exact algebra: for radial u,
every Y^a u has the form sum_k (D^k u)(r) P_k(x) with D = r^-1 d/dr and P_k
polynomials, so squared norms reduce to radial integrals against sphere
moments of monomials.  Only D^k u needs finite differences.
"""

from __future__ import annotations

import csv
import itertools
import math
from collections import defaultdict
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .grid import ContractViolation, GridSpec, GridState, sphere_area
from .solver import WaveOperator


# --- vector field indices --------------------------------------------------


def field_names(n: int) -> list[str]:
    names = [f"d{i + 1}" for i in range(n)]
    names += [f"O{i + 1}{j + 1}" for i, j in itertools.combinations(range(n), 2)]
    return names


def _field_kind(n: int, f: int):
    """('d', i) or ('O', i, j) for field number f."""
    if f < n:
        return ("d", f)
    i, j = list(itertools.combinations(range(n), 2))[f - n]
    return ("O", i, j)


@dataclass(frozen=True, order=True)
class VectorFieldIndex:
    """Unordered multi-index over the n(n+1)/2 fields, as a sorted tuple.

    Fields are applied in listed order, so (f1, f2) means Y_f2 Y_f1 and
    translations act before rotations.
    """

    fields: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "fields", tuple(sorted(self.fields)))
        if len(self.fields) > 2:
            raise ValueError("vector field order is capped at 2")

    @property
    def order(self) -> int:
        return len(self.fields)

    def has_rotation(self, n: int) -> bool:
        return any(f >= n for f in self.fields)

    def label(self, n: int) -> str:
        names = field_names(n)
        return "".join(names[f] for f in self.fields) or "id"


def indices_up_to(n: int, m: int) -> list[VectorFieldIndex]:
    nf = n * (n + 1) // 2
    out = []
    for order in range(m + 1):
        out += [VectorFieldIndex(c) for c in itertools.combinations_with_replacement(range(nf), order)]
    return out


# --- Cartesian vector fields ------------------------------------------------


def _partial(grid: GridSpec, f: np.ndarray, axis: int) -> np.ndarray:
    h = grid.h
    if grid.periodic:
        return (np.roll(f, -1, axis=axis) - np.roll(f, 1, axis=axis)) / (2.0 * h)
    return np.gradient(f, h, axis=axis, edge_order=2)


def _apply_field(grid: GridSpec, f: np.ndarray, fid: int) -> np.ndarray:
    kind = _field_kind(3, fid)
    if kind[0] == "d":
        return _partial(grid, f, kind[1])
    _, i, j = kind
    x = grid.coords()
    return x[i] * _partial(grid, f, j) - x[j] * _partial(grid, f, i)


def vector_field_apply(grid: GridSpec, field: np.ndarray, idx: VectorFieldIndex) -> np.ndarray:
    """Y^idx applied to a field on a Cartesian grid (centered differences)."""
    if grid.is_radial:
        raise ContractViolation(
            "vector fields act on Cartesian grids only; rotations annihilate radial "
            "functions and radial norms use the exact jet algebra")
    field = np.asarray(field, dtype=float)
    if field.shape != grid.shape:
        raise ContractViolation(f"field shape {field.shape} does not match grid {grid.shape}")
    out = field
    for fid in idx.fields:
        out = _apply_field(grid, out, fid)
    return out


# --- radial jet algebra -----------------------------------------------------


def _poly_mul_x(P: dict, i: int) -> dict:
    out = {}
    for e, c in P.items():
        e2 = list(e)
        e2[i] += 1
        out[tuple(e2)] = out.get(tuple(e2), 0.0) + c
    return out


def _poly_d(P: dict, i: int) -> dict:
    out = {}
    for e, c in P.items():
        if e[i] == 0:
            continue
        e2 = list(e)
        e2[i] -= 1
        out[tuple(e2)] = out.get(tuple(e2), 0.0) + c * e[i]
    return out


def _poly_add(*ps, signs=None) -> dict:
    out = {}
    signs = signs or [1.0] * len(ps)
    for s, P in zip(signs, ps):
        for e, c in P.items():
            out[e] = out.get(e, 0.0) + s * c
    return {e: c for e, c in out.items() if c != 0.0}


def _form_apply(form: dict, n: int, fid: int) -> dict:
    """Apply one vector field to sum_k (D^k u) P_k."""
    kind = _field_kind(n, fid)
    out = defaultdict(dict)
    for k, P in form.items():
        if kind[0] == "d":
            i = kind[1]
            out[k + 1] = _poly_add(out[k + 1], _poly_mul_x(P, i))
            out[k] = _poly_add(out[k], _poly_d(P, i))
        else:
            _, i, j = kind
            rot = _poly_add(_poly_mul_x(_poly_d(P, j), i), _poly_mul_x(_poly_d(P, i), j),
                            signs=[1.0, -1.0])
            out[k] = _poly_add(out[k], rot)
    return {k: P for k, P in out.items() if P}


def sphere_moment(gamma: tuple[int, ...]) -> float:
    """Integral of omega^gamma over the unit sphere S^(n-1)."""
    if any(g % 2 for g in gamma):
        return 0.0
    n = len(gamma)
    num = 1.0
    for g in gamma:
        num *= math.gamma(0.5 * (g + 1))
    return 2.0 * num / math.gamma(0.5 * (sum(gamma) + n))


def _density_coeffs(form: dict, K: int) -> dict:
    """{(k, l): {deg: c}} with int_S |sum_k J_k P_k(r w)|^2 dw = sum J_k J_l c r^deg."""
    out = defaultdict(lambda: defaultdict(float))
    for k, Pk in form.items():
        for l, Pl in form.items():
            for a, ca in Pk.items():
                for b, cb in Pl.items():
                    g = tuple(x + y for x, y in zip(a, b))
                    m = sphere_moment(g)
                    if m:
                        out[(k, l)][sum(g)] += ca * cb * m
    return out


@lru_cache(maxsize=None)
def _radial_tables(n: int, m: int):
    """Per-index density coefficients for Y^a (plain) and grad Y^a (summed over d_i)."""
    K = m + 2
    idx = indices_up_to(n, m)
    plain, grad = [], []
    for a in idx:
        form = {0: {(0,) * n: 1.0}}
        for fid in a.fields:
            form = _form_apply(form, n, fid)
        plain.append(_density_coeffs(form, K))
        g = defaultdict(lambda: defaultdict(float))
        for i in range(n):
            gi = _density_coeffs(_form_apply(form, n, i), K)
            for kl, poly in gi.items():
                for d, c in poly.items():
                    g[kl][d] += c
        grad.append(g)
    return idx, K, plain, grad


def _eval_tables(tables, K, r):
    out = np.zeros((len(tables), K, K, r.size))
    for a, tab in enumerate(tables):
        for (k, l), poly in tab.items():
            for d, c in poly.items():
                out[a, k, l] += c * r ** d
    return out


def radial_D(f: np.ndarray, h: float, r: np.ndarray) -> np.ndarray:
    """D f = f'(r) / r for an even profile sampled at r_i = i h.

    Uses the even extension f(-h) = f(h); at the origin D f = f''(0).
    """
    out = np.empty_like(f)
    out[1:-1] = (f[2:] - f[:-2]) / (2.0 * h * r[1:-1])
    out[0] = 2.0 * (f[1] - f[0]) / (h * h)
    out[-1] = (3.0 * f[-1] - 4.0 * f[-2] + f[-3]) / (2.0 * h * r[-1])
    return out


# --- dyadic partition of unity -----------------------------------------------


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * t * (10.0 - 15.0 * t + 6.0 * t * t)


@dataclass(frozen=True)
class DyadicPartition:
    """phi_0..phi_J with sum phi_j^2 = 1, phi_j supported on <x> in [2^(j-1), 2^(j+1)].

    In tau = log2 <x>, neighbouring profiles are cos(theta) and sin(theta) of one
    C^2 ramp theta = (pi/2) s(tau - j), so squares telescope exactly.  The last
    profile stays 1 beyond 2^J.
    """

    J: int

    @classmethod
    def for_grid(cls, grid: GridSpec) -> "DyadicPartition":
        rmax = grid.extent * (1.0 if grid.is_radial else math.sqrt(3.0))
        return cls(max(1, math.ceil(math.log2(math.sqrt(1.0 + rmax * rmax)))))

    def phi(self, j: int, r) -> np.ndarray:
        tau = np.log2(np.sqrt(1.0 + np.asarray(r, dtype=float) ** 2))
        half_pi = 0.5 * math.pi
        rise = np.sin(half_pi * _smoothstep(tau - j + 1.0))
        fall = np.cos(half_pi * _smoothstep(tau - j))
        if j == 0:
            return np.where(tau >= 1.0, 0.0, fall)
        if j == self.J:
            return np.where(tau <= j - 1.0, 0.0, rise)
        return np.where(tau <= j - 1.0, 0.0, np.where(tau <= j, rise, np.where(tau < j + 1.0, fall, 0.0)))

    def squares(self, r) -> np.ndarray:
        """Array (J+1, *r.shape) of phi_j^2."""
        return np.stack([self.phi(j, r) ** 2 for j in range(self.J + 1)])

    def closure_error(self, r) -> float:
        return float(np.max(np.abs(self.squares(r).sum(axis=0) - 1.0)))


# --- per-state densities -----------------------------------------------------


class NormEvaluator:
    """Flat-space densities of d Y^a u and Y^a u for every |a| <= m on a grid."""

    def __init__(self, grid: GridSpec, m: int = 2):
        if m not in (0, 1, 2):
            raise ValueError("m must be 0, 1 or 2")
        self.grid = grid
        self.m = m
        self.r = grid.radius()
        if grid.is_radial:
            idx, K, plain, grad = _radial_tables(grid.n, m)
            self.indices = idx
            self.K = K
            self._plain = _eval_tables(plain, K, self.r)
            self._grad = _eval_tables(grad, K, self.r)
            self.weights = grid.cell_volumes() / sphere_area(grid.n)
        else:
            self.indices = indices_up_to(3, m)
            self.weights = grid.cell_volumes()
        self.orders = np.array([a.order for a in self.indices])

    def _jets(self, f):
        h, r = self.grid.h, self.r
        jets = [np.asarray(f, dtype=float)]
        for _ in range(self.K - 1):
            jets.append(radial_D(jets[-1], h, r))
        return np.stack(jets)

    def densities(self, state: GridState):
        """(grad, plain): arrays (A, *shape); grad = |d_t Y^a u|^2 + |grad Y^a u|^2.

        Radial densities are already integrated over the unit sphere.
        """
        if state.blown_up or not state.finite:
            raise ValueError("norms are undefined on a blown-up state")
        state.check(self.grid)
        if self.grid.is_radial:
            ju, jv = self._jets(state.u), self._jets(state.v)
            grad = (np.einsum("aklr,kr,lr->ar", self._grad, ju, ju)
                    + np.einsum("aklr,kr,lr->ar", self._plain, jv, jv))
            plain = np.einsum("aklr,kr,lr->ar", self._plain, ju, ju)
            return grad, plain
        grid = self.grid
        cache_u, cache_v = {(): state.u}, {(): state.v}

        def apply(cache, fields):
            if fields not in cache:
                cache[fields] = _apply_field(grid, apply(cache, fields[:-1]), fields[-1])
            return cache[fields]

        grad, plain = [], []
        for a in self.indices:
            yu = apply(cache_u, a.fields)
            yv = apply(cache_v, a.fields)
            g = yv * yv
            for i in range(3):
                d = _partial(grid, yu, i)
                g = g + d * d
            grad.append(g)
            plain.append(yu * yu)
        return np.stack(grad), np.stack(plain)

    def integrate(self, dens: np.ndarray, weight=None) -> np.ndarray:
        """Per-index integrals sum_x W(x) weight(x) dens_a(x)."""
        w = self.weights if weight is None else self.weights * weight
        return (dens * w).reshape(dens.shape[0], -1).sum(axis=1)

    def gradient_norms(self, state: GridState) -> np.ndarray:
        """||d Y^a u(t)||_{L^2} for each index."""
        grad, _ = self.densities(state)
        return np.sqrt(self.integrate(grad))

    def order_sum(self, norms: np.ndarray, m: int) -> float:
        return float(norms[self.orders <= m].sum())


def _operator(op_or_metric, grid):
    if isinstance(op_or_metric, WaveOperator):
        return op_or_metric
    if grid is None:
        raise ValueError("a grid is needed to build the operator")
    return WaveOperator(grid, op_or_metric)


def energy(state: GridState, op_or_metric, grid: GridSpec | None = None) -> float:
    """E(t) = (1/2 int (u_t^2 + g^jk d_j u d_k u) sqrt|g| dx)^(1/2), discretely."""
    if state.blown_up or not state.finite:
        raise ValueError("energy is undefined on a blown-up state")
    op = _operator(op_or_metric, grid)
    return math.sqrt(op.energy_squared(state.u, state.v))


def energy_order_m(traj, grid: GridSpec, m: int = 0, evaluator: NormEvaluator | None = None) -> float:
    """||u||_{E_m}: max over samples of sum_{|a|<=m} ||d Y^a u(t)||_{L^2} (flat)."""
    ev = evaluator if evaluator is not None else NormEvaluator(grid, m)
    best = 0.0
    for s in traj:
        best = max(best, ev.order_sum(ev.gradient_norms(s), m))
    return best


# --- local energy ------------------------------------------------------------


@dataclass
class LEResult:
    total: float
    energy: float
    grad: float
    ru: float
    per_index: dict = field(default_factory=dict)


class LocalEnergyAccumulator:
    """Single pass over a trajectory accumulating E_m(t) and the LE_m pieces.

    The time integrals of the l^{-1/2}_infty pieces are trapezoid sums over the
    samples; running values are available after each sample.
    """

    def __init__(self, grid: GridSpec, m: int = 2, partition: DyadicPartition | None = None,
                 evaluator: NormEvaluator | None = None):
        self.grid = grid
        self.m = m
        self.ev = evaluator if evaluator is not None else NormEvaluator(grid, m)
        self.partition = partition if partition is not None else DyadicPartition.for_grid(grid)
        r = self.ev.r
        self._phi2 = self.partition.squares(r)
        self._inv_r2 = 1.0 / np.maximum(r, 0.5 * grid.h) ** 2
        self._dyadic = 2.0 ** (-0.5 * np.arange(self.partition.J + 1))
        A = len(self.ev.indices)
        self.sup_energy = np.zeros(A)
        self._int_grad = np.zeros((A, self.partition.J + 1))
        self._int_ru = np.zeros((A, self.partition.J + 1))
        self._prev = None
        self.times = []
        self.order_sums = []

    def _annulus_integrals(self, dens, weight=None):
        w = self.ev.weights if weight is None else self.ev.weights * weight
        A = dens.shape[0]
        d = (dens * w).reshape(A, -1)
        return d @ self._phi2.reshape(self._phi2.shape[0], -1).T

    def add(self, state: GridState):
        grad, plain = self.ev.densities(state)
        norms = np.sqrt(self.ev.integrate(grad))
        self.sup_energy = np.maximum(self.sup_energy, norms)
        g_j = self._annulus_integrals(grad)
        r_j = self._annulus_integrals(plain, self._inv_r2)
        if self._prev is not None:
            t0, g0, r0 = self._prev
            dt = state.t - t0
            self._int_grad += 0.5 * dt * (g0 + g_j)
            self._int_ru += 0.5 * dt * (r0 + r_j)
        self._prev = (state.t, g_j, r_j)
        self.times.append(state.t)
        self.order_sums.append([self.ev.order_sum(norms, k) for k in range(self.m + 1)])
        return norms

    def result(self, m: int | None = None) -> LEResult:
        m = self.m if m is None else m
        sel = self.ev.orders <= m
        grad = (np.sqrt(self._int_grad) * self._dyadic).max(axis=1)
        ru = (np.sqrt(self._int_ru) * self._dyadic).max(axis=1)
        e, g, q = self.sup_energy[sel].sum(), grad[sel].sum(), ru[sel].sum()
        labels = [a.label(self.grid.n) for a in self.ev.indices]
        per = {lab: (float(self.sup_energy[i]), float(grad[i]), float(ru[i]))
               for i, lab in enumerate(labels) if sel[i]}
        return LEResult(total=float(e + g + q), energy=float(e), grad=float(g), ru=float(q), per_index=per)


def le_norm(traj, grid: GridSpec, partition: DyadicPartition | None = None, m: int = 0) -> LEResult:
    """||u||_{LE_m} = sum_{|a|<=m} ||Y^a u||_{LE} with

    ||w||_LE = sup_t ||dw||_2 + sup_j 2^(-j/2) ||phi_j dw||_{L2L2}
               + sup_j 2^(-j/2) ||phi_j w / r||_{L2L2},
    r^-1 regularized as 1 / max(r, h/2).
    """
    acc = LocalEnergyAccumulator(grid, m, partition)
    for s in traj:
        acc.add(s)
    return acc.result()


# --- reports -------------------------------------------------------------------


@dataclass
class EnergyReport:
    times: list = field(default_factory=list)
    E: list = field(default_factory=list)
    E0: list = field(default_factory=list)
    E1: list = field(default_factory=list)
    E2: list = field(default_factory=list)
    LE_energy: list = field(default_factory=list)
    LE_grad: list = field(default_factory=list)
    LE_ru: list = field(default_factory=list)
    LE_total: list = field(default_factory=list)
    measured: dict = field(default_factory=dict)
    cadence: float | None = None

    COLUMNS = ("t", "E", "E1", "E2", "LE_energy", "LE_grad", "LE_ru", "LE_total")

    def rows(self):
        for k in range(len(self.times)):
            yield (self.times[k], self.E[k], self.E1[k], self.E2[k], self.LE_energy[k],
                   self.LE_grad[k], self.LE_ru[k], self.LE_total[k])

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for row in self.rows():
                w.writerow([repr(float(x)) for x in row])

    @property
    def final_le(self) -> float:
        return self.LE_total[-1] if self.LE_total else 0.0


def energy_report(traj, op: WaveOperator, m_le: int = 2, partition: DyadicPartition | None = None,
                  cadence: float | None = None) -> EnergyReport:
    """E(t), E_0..E_2(t) and running LE_{m_le} pieces over [t_0, t] at every sample."""
    grid = op.grid
    acc = LocalEnergyAccumulator(grid, 2, partition)
    rep = EnergyReport(cadence=cadence)
    for s in traj:
        if s.blown_up or not s.finite:
            break
        acc.add(s)
        le = acc.result(m_le)
        sums = acc.order_sums[-1]
        rep.times.append(s.t)
        rep.E.append(math.sqrt(op.energy_squared(s.u, s.v)))
        rep.E0.append(sums[0])
        rep.E1.append(sums[1])
        rep.E2.append(sums[2])
        rep.LE_energy.append(le.energy)
        rep.LE_grad.append(le.grad)
        rep.LE_ru.append(le.ru)
        rep.LE_total.append(le.total)
    rep.measured["partition_J"] = acc.partition.J
    return rep
