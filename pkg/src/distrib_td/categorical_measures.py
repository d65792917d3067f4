"""Categorical signed measures on an equispaced return grid.

A measure on the grid ``x_k = k * iota`` (``k = 0..K``) is stored as the
masses ``p_0..p_{K-1}``; the mass at ``x_K`` is implied by total mass one.
Masses may be negative, since linear parametrizations leave the simplex.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class CategoricalGrid:
    K: int
    gamma: float

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 1:
            raise ValueError(f"K must be a positive integer, got {self.K}")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        object.__setattr__(self, "K", int(self.K))
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def iota(self) -> float:
        return 1.0 / (self.K * (1.0 - self.gamma))

    @property
    def upper(self) -> float:
        return 1.0 / (1.0 - self.gamma)

    @property
    def x(self) -> np.ndarray:
        return np.arange(self.K + 1) * self.iota

    @property
    def resolution_ok(self) -> bool:
        # several error bounds need at least one atom per unit of reward
        return self.K * (1.0 - self.gamma) >= 1.0 - 1e-12


@dataclass(frozen=True, eq=False)
class SignedCategoricalMeasure:
    grid: CategoricalGrid
    p: np.ndarray
    resolution_warning: bool = field(default=False)

    def __post_init__(self):
        p = np.array(self.p, dtype=float).reshape(-1)
        if p.shape != (self.grid.K,):
            raise ValueError(f"expected {self.grid.K} masses, got {p.shape[0]}")
        p.setflags(write=False)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "resolution_warning", not self.grid.resolution_ok)

    @property
    def last_mass(self) -> float:
        return 1.0 - float(self.p.sum())

    @property
    def masses(self) -> np.ndarray:
        """All K+1 masses, including the implicit one at the top atom."""
        return np.append(self.p, self.last_mass)

    def cdf(self) -> CdfVector:
        return CdfVector(self.grid, np.cumsum(self.p))

    @classmethod
    def from_masses(cls, grid, masses):
        masses = np.asarray(masses, dtype=float)
        if masses.shape != (grid.K + 1,):
            raise ValueError(f"expected {grid.K + 1} masses, got {masses.shape}")
        return cls(grid, masses[:-1])

    @classmethod
    def dirac(cls, grid, k):
        masses = np.zeros(grid.K + 1)
        masses[k] = 1.0
        return cls.from_masses(grid, masses)

    @classmethod
    def uniform(cls, grid):
        return cls(grid, np.full(grid.K, 1.0 / (grid.K + 1)))

    def to_csv_row(self) -> str:
        return ",".join([str(self.grid.K), repr(self.grid.gamma)] + [repr(float(v)) for v in self.p])

    @classmethod
    def from_csv_row(cls, row: str):
        parts = row.strip().split(",")
        grid = CategoricalGrid(int(parts[0]), float(parts[1]))
        return cls(grid, np.array([float(v) for v in parts[2:]]))


@dataclass(frozen=True, eq=False)
class CdfVector:
    grid: CategoricalGrid
    F: np.ndarray

    def to_measure(self) -> SignedCategoricalMeasure:
        F = np.asarray(self.F, dtype=float)
        return SignedCategoricalMeasure(self.grid, np.diff(F, prepend=0.0))


@dataclass(frozen=True)
class GeneralMeasure:
    """Finite mixture of point masses and uniform segments on the return range.

    ``atoms`` holds ``(location, mass)`` pairs and ``segments`` holds
    ``(left, right, mass)`` triples with mass spread uniformly on [left, right].
    """

    atoms: tuple = ()
    segments: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "atoms", tuple((float(x), float(m)) for x, m in self.atoms))
        object.__setattr__(self, "segments", tuple((float(a), float(b), float(m)) for a, b, m in self.segments))
        for a, b, _ in self.segments:
            if b < a:
                raise ValueError(f"segment [{a}, {b}] has right < left")
        total = sum(m for _, m in self.atoms) + sum(m for _, _, m in self.segments)
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"total mass must be 1, got {total!r}")

    def mean(self) -> float:
        return sum(x * m for x, m in self.atoms) + sum(0.5 * (a + b) * m for a, b, m in self.segments)

    def check_support(self, grid: CategoricalGrid, tol=1e-12):
        hi = grid.upper
        for x, _ in self.atoms:
            if x < -tol or x > hi + tol:
                raise ValueError(f"atom at {x} lies outside [0, {hi}]")
        for a, b, _ in self.segments:
            if a < -tol or b > hi + tol:
                raise ValueError(f"segment [{a}, {b}] lies outside [0, {hi}]")


def _hat_antiderivative(t):
    t = np.clip(t, -1.0, 1.0)
    return np.where(t <= 0.0, 0.5 * (t + 1.0) ** 2, 1.0 - 0.5 * (1.0 - t) ** 2)


def _split_positions(y, K):
    """Lower atom index and interpolation weight for grid-unit positions y."""
    y = np.clip(np.asarray(y, dtype=float), 0.0, float(K))
    k = np.minimum(np.floor(y), K - 1).astype(int)
    return k, y - k


def project_categorical(nu: GeneralMeasure, grid: CategoricalGrid) -> SignedCategoricalMeasure:
    """Cramer projection onto the grid: mass at x_k is the integral of the hat at x_k."""
    nu.check_support(grid)
    K, iota = grid.K, grid.iota
    masses = np.zeros(K + 1)
    if nu.atoms:
        loc = np.array([x for x, _ in nu.atoms])
        w = np.array([m for _, m in nu.atoms])
        k, a = _split_positions(loc / iota, K)
        np.add.at(masses, k, (1.0 - a) * w)
        np.add.at(masses, k + 1, a * w)
    xk = grid.x
    for left, right, m in nu.segments:
        if right - left <= 1e-15 * max(1.0, grid.upper):
            k, a = _split_positions(np.array([0.5 * (left + right) / iota]), K)
            masses[k[0]] += (1.0 - a[0]) * m
            masses[k[0] + 1] += a[0] * m
            continue
        hi = _hat_antiderivative((right - xk) / iota)
        lo = _hat_antiderivative((left - xk) / iota)
        masses += m * iota * (hi - lo) / (right - left)
    return SignedCategoricalMeasure.from_masses(grid, masses)


def _check_same_grid(a, b):
    if a.grid != b.grid:
        raise ValueError(f"grid mismatch: {a.grid} vs {b.grid}")


def cramer_l2(a: SignedCategoricalMeasure, b: SignedCategoricalMeasure) -> float:
    _check_same_grid(a, b)
    gap = np.cumsum(a.p - b.p)
    return math.sqrt(a.grid.iota) * float(np.linalg.norm(gap))


def wasserstein_w1(a: SignedCategoricalMeasure, b: SignedCategoricalMeasure) -> float:
    _check_same_grid(a, b)
    gap = np.cumsum(a.p - b.p)
    return a.grid.iota * float(np.abs(gap).sum())


def measure_mean(nu: SignedCategoricalMeasure) -> float:
    return float(nu.grid.x @ nu.masses)


def shift_positions(r: float, grid: CategoricalGrid):
    """Split of the shifted atoms r + gamma * x_j (j = 0..K) onto the grid.

    Returns the lower index k_j and the weight a_j sent to k_j + 1, so the
    image of atom j is (1 - a_j) at k_j and a_j at k_j + 1.
    """
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"reward must lie in [0, 1], got {r}")
    y = r / grid.iota + grid.gamma * np.arange(grid.K + 1)
    return _split_positions(y, grid.K)


def pushforward_project(nu: SignedCategoricalMeasure, r: float, grid: CategoricalGrid | None = None):
    """Categorical projection of the law of r + gamma * X for X ~ nu.

    Uses p' = Gt (p - 1/(K+1)) + (1/(K+1)) sum_j g_j, with g_j the projected
    image of atom j and Gt the kernel with columns g_j - g_K.
    """
    grid = nu.grid if grid is None else grid
    if grid != nu.grid:
        raise ValueError("measure and grid disagree")
    K = grid.K
    k, a = shift_positions(r, grid)
    u = 1.0 / (K + 1)
    # g_j restricted to the first K coordinates, assembled per atom
    def apply_G(v):
        out = np.zeros(K + 1)
        np.add.at(out, k, (1.0 - a) * v)
        np.add.at(out, k + 1, a * v)
        return out[:K]

    gK = apply_G(np.eye(1, K + 1, K).ravel())
    centered = np.append(nu.p - u, 0.0)
    Gt_p = apply_G(centered) - centered.sum() * gK
    p_new = Gt_p + u * apply_G(np.ones(K + 1))
    return SignedCategoricalMeasure(grid, p_new)

