"""Spatial grids and time-instant states."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np


class ContractViolation(ValueError):
    """Array shapes or grid kinds that do not fit the operation."""


def sphere_area(n: int) -> float:
    """Surface measure of the unit sphere S^(n-1)."""
    return 2.0 * math.pi ** (0.5 * n) / math.gamma(0.5 * n)


@dataclass(frozen=True)
class GridSpec:
    """Radial grid r_i = i h on [0, R], or a Cartesian cube [-R, R]^3.

    A periodic Cartesian grid drops the duplicate right endpoint, so it has
    spacing 2R / points instead of 2R / (points - 1).
    """

    kind: str = "radial"
    extent: float = 20.0
    points: int = 401
    n: int = 3
    periodic: bool = False

    def __post_init__(self):
        errors = self.violations()
        if errors:
            raise ContractViolation("; ".join(errors))

    def violations(self) -> list[str]:
        errors = []
        if self.kind not in ("radial", "cartesian3d"):
            errors.append(f"kind must be 'radial' or 'cartesian3d' (got {self.kind!r})")
        if self.points < 16:
            errors.append("points must be at least 16")
        if not self.extent > 0:
            errors.append("extent must be positive")
        if self.kind == "cartesian3d" and self.n != 3:
            errors.append("cartesian3d grids fix n = 3")
        if self.kind == "radial" and self.n not in (2, 3, 4):
            errors.append("radial grids support n in {2, 3, 4}")
        if self.kind == "radial" and self.periodic:
            errors.append("radial grids cannot be periodic")
        return errors

    @property
    def is_radial(self) -> bool:
        return self.kind == "radial"

    @property
    def h(self) -> float:
        if self.is_radial:
            return self.extent / (self.points - 1)
        if self.periodic:
            return 2.0 * self.extent / self.points
        return 2.0 * self.extent / (self.points - 1)

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.points,) if self.is_radial else (self.points,) * 3

    def axis(self) -> np.ndarray:
        """1D node coordinates (radii for the radial kind)."""
        if self.is_radial:
            return np.arange(self.points) * self.h
        return -self.extent + np.arange(self.points) * self.h

    def coords(self) -> tuple[np.ndarray, ...]:
        """Node coordinates; for Cartesian grids a broadcastable (x1, x2, x3)."""
        x = self.axis()
        if self.is_radial:
            return (x,)
        return (x[:, None, None], x[None, :, None], x[None, None, :])

    def points_array(self) -> np.ndarray:
        """Node coordinates as an array of shape (*shape, n) (radial: on the x1 axis)."""
        if self.is_radial:
            pts = np.zeros((self.points, self.n))
            pts[:, 0] = self.axis()
            return pts
        x1, x2, x3 = np.meshgrid(self.axis(), self.axis(), self.axis(), indexing="ij")
        return np.stack([x1, x2, x3], axis=-1)

    def radius(self) -> np.ndarray:
        if self.is_radial:
            return self.axis()
        x1, x2, x3 = self.coords()
        return np.sqrt(x1 * x1 + x2 * x2 + x3 * x3)

    def axis_weights(self) -> np.ndarray:
        """1D quadrature weights along one Cartesian axis (trapezoid or periodic)."""
        w = np.full(self.points, self.h)
        if not self.periodic:
            w[0] = w[-1] = 0.5 * self.h
        return w

    def cell_volumes(self) -> np.ndarray:
        """Flat dual-cell volumes, the quadrature weights of every integral.

        Radial cells are the shells [r_(i-1/2), r_(i+1/2)] (a ball of radius h/2
        at the origin, a half shell at r = R), so constants and r^2 integrate
        exactly.
        """
        if self.is_radial:
            r = self.axis()
            n = self.n
            lo = np.maximum(r - 0.5 * self.h, 0.0)
            hi = np.minimum(r + 0.5 * self.h, self.extent)
            return sphere_area(n) * (hi ** n - lo ** n) / n
        w = self.axis_weights()
        return w[:, None, None] * w[None, :, None] * w[None, None, :]

    def distance_to_boundary(self, mask: np.ndarray) -> float:
        """Distance from the set ``mask`` to the outer boundary (inf if periodic)."""
        if self.periodic:
            return math.inf
        if not mask.any():
            return self.extent
        if self.is_radial:
            return self.extent - float(self.axis()[mask].max())
        x = np.abs(self.axis())
        idx = np.nonzero(mask)
        reach = max(x[idx[0]].max(), x[idx[1]].max(), x[idx[2]].max())
        return self.extent - float(reach)

    def refined(self) -> "GridSpec":
        """Same extent with spacing halved."""
        if self.periodic:
            return replace(self, points=2 * self.points)
        return replace(self, points=2 * (self.points - 1) + 1)


@dataclass(frozen=True, eq=False)
class GridState:
    """(u, du/dt) on a grid at time t.  Arrays are stored read-only."""

    t: float
    u: np.ndarray
    v: np.ndarray
    blown_up: bool = False

    def __post_init__(self):
        u = np.array(self.u, dtype=float)
        v = np.array(self.v, dtype=float)
        if u.shape != v.shape:
            raise ContractViolation(f"u and v shapes differ: {u.shape} vs {v.shape}")
        u.flags.writeable = False
        v.flags.writeable = False
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "t", float(self.t))

    @property
    def finite(self) -> bool:
        return bool(np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.v)))

    def check(self, grid: GridSpec):
        if self.u.shape != grid.shape:
            raise ContractViolation(f"state shape {self.u.shape} does not match grid {grid.shape}")

    @classmethod
    def zeros(cls, grid: GridSpec, t: float = 0.0) -> "GridState":
        return cls(t, np.zeros(grid.shape), np.zeros(grid.shape))
