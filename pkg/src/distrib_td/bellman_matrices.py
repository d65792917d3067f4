"""Structural matrices of the categorical Bellman equation in CDF coordinates.

``C`` is the K x K lower-triangular matrix of ones (PMF to CDF), so ``C`` acts
as a cumulative sum and ``C^{-1}`` as a first difference. The shift kernel
``g_j(r)`` is the projected image of atom ``x_j`` under ``x -> r + gamma*x``,
restricted to its first K coordinates.

For ``Y = C Gt(r) C^{-1}`` the entry ``Y[i, j]`` couples CDF index ``i`` to
source atom ``j``. Every column of ``Y`` sums to ``gamma`` (the shift moves
each source atom's mean by exactly ``gamma`` grid units) and every row sums to
at most one.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .categorical_measures import CategoricalGrid, shift_positions
from .linalg_core import eig_sym, spectral_norm, sqrtm_psd, symmetrize


def cumulative_matrix(K):
    return np.tril(np.ones((K, K)))


def cumulative_inverse(K):
    return np.eye(K) - np.eye(K, k=-1)


def ctc_matrix(K):
    """C^T C, whose (i, j) entry (0-indexed) is K - max(i, j)."""
    idx = np.arange(K)
    return (K - np.maximum.outer(idx, idx)).astype(float)


def to_cdf(p, axis=0):
    return np.cumsum(p, axis=axis)


def to_pmf(F, axis=0):
    F = np.asarray(F, dtype=float)
    return np.diff(F, axis=axis, prepend=np.zeros_like(np.take(F, [0], axis=axis)))


def hat_coeff(j, k, r, grid: CategoricalGrid) -> float:
    if not 0 <= j <= grid.K:
        raise IndexError(f"atom index j={j} outside 0..{grid.K}")
    if not 0 <= k <= grid.K - 1:
        raise IndexError(f"target index k={k} outside 0..{grid.K - 1}")
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"reward must lie in [0, 1], got {r}")
    return max(0.0, 1.0 - abs(r / grid.iota + grid.gamma * j - k))


@dataclass(frozen=True, eq=False)
class ShiftKernel:
    grid: CategoricalGrid
    r: float
    lower: np.ndarray  # k_j for j = 0..K
    frac: np.ndarray  # weight a_j sent to k_j + 1
    G: np.ndarray  # K x K, columns g_0..g_{K-1}
    gK: np.ndarray
    Gtilde: np.ndarray
    b_vec: np.ndarray  # (K+1)^{-1} C (sum_j g_j - 1)

    def apply_G_full(self, v):
        """sum_j v_j g_j over all K+1 atoms; v has shape (K+1,) or (K+1, B)."""
        v = np.asarray(v, dtype=float)
        K = self.grid.K
        if v.ndim == 1:
            out = np.bincount(self.lower, (1.0 - self.frac) * v, minlength=K + 1)
            out += np.bincount(self.lower + 1, self.frac * v, minlength=K + 1)
            return out[:K]
        out = np.zeros((K + 1, v.shape[1]))
        np.add.at(out, self.lower, (1.0 - self.frac)[:, None] * v)
        np.add.at(out, self.lower + 1, self.frac[:, None] * v)
        return out[:K]

    def apply_Y(self, q):
        """C Gt C^{-1} q in O(K) per column."""
        q = np.asarray(q, dtype=float)
        v = to_pmf(q)
        pad = np.zeros((1,) + v.shape[1:])
        gv = self.apply_G_full(np.concatenate([v, pad]))
        gv -= np.multiply.outer(self.gK, v.sum(axis=0)) if v.ndim > 1 else self.gK * v.sum()
        return to_cdf(gv)


def build_shift_kernel(r: float, grid: CategoricalGrid) -> ShiftKernel:
    K = grid.K
    lower, frac = shift_positions(r, grid)
    full = np.zeros((K + 1, K + 1))
    cols = np.arange(K + 1)
    np.add.at(full, (lower, cols), 1.0 - frac)
    np.add.at(full, (lower + 1, cols), frac)
    G_all = full[:K]
    G = G_all[:, :K].copy()
    gK = G_all[:, K].copy()
    Gtilde = G - gK[:, None]
    b_vec = to_cdf(G_all.sum(axis=1) - 1.0) / (K + 1)
    for a in (G, gK, Gtilde, b_vec, lower, frac):
        a.setflags(write=False)
    return ShiftKernel(grid, float(r), lower, frac, G, gK, Gtilde, b_vec)


@lru_cache(maxsize=4096)
def cached_kernel(r: float, K: int, gamma: float) -> ShiftKernel:
    return build_shift_kernel(r, CategoricalGrid(K, gamma))


def projected_bellman_matrix(r: float, grid: CategoricalGrid) -> np.ndarray:
    """Dense C Gt(r) C^{-1}, built column-wise without forming C^{-1}."""
    Gt = build_shift_kernel(r, grid).Gtilde
    # right-multiplying by C^{-1} differences neighbouring columns
    Gt_Cinv = Gt - np.concatenate([Gt[:, 1:], np.zeros((grid.K, 1))], axis=1)
    return np.cumsum(Gt_Cinv, axis=0)


def projected_bellman_triplets(r: float, grid: CategoricalGrid):
    """Exact nonzeros ``(rows, cols, vals)`` of C Gt(r) C^{-1}.

    Column j equals F_j - F_{j+1}, where F_j is the CDF of the projected image
    of atom j. Neighbouring lower indices differ by at most one (gamma < 1), so
    each column is supported on rows k_j and k_j + 1 only.
    """
    K = grid.K
    k, a = shift_positions(r, grid)
    j = np.arange(K)
    k0, k1, a0, a1 = k[:-1], k[1:], a[:-1], a[1:]
    same = k1 == k0
    top = np.where(same, a1 - a0, 1.0 - a0)  # row k_j
    nxt = np.where(same, 0.0, a1)  # row k_j + 1, present only when it is inside the grid
    rows = np.concatenate([k0, k0 + 1])
    cols = np.concatenate([j, j])
    vals = np.concatenate([top, nxt])
    keep = (rows < K) & (vals != 0.0)
    return rows[keep], cols[keep], vals[keep]


def ctc_spectrum(K: int) -> np.ndarray:
    """Eigenvalues of C^T C in ascending order."""
    if K < 1:
        raise ValueError("K must be positive")
    k = np.arange(1, K + 1)
    return 1.0 / (4.0 * np.cos(k * np.pi / (2 * K + 1)) ** 2)


def ctc_norm(K: int) -> float:
    return 1.0 / (4.0 * np.sin(np.pi / (4 * K + 2)) ** 2)


def ctc_inverse_norm(K: int) -> float:
    return 4.0 * np.cos(np.pi / (2 * K + 1)) ** 2


def kink_points(grid: CategoricalGrid) -> np.ndarray:
    """Rewards in [0, 1] where some shifted atom lands exactly on the grid."""
    K, g = grid.K, grid.gamma
    scale = 1.0 / grid.iota
    pts = []
    for j in range(K + 1):
        lo = np.ceil(g * j - 1e-12)
        hi = np.floor(scale + g * j + 1e-12)
        m = np.arange(lo, hi + 1)
        pts.append((m - g * j) / scale)
    r = np.concatenate(pts) if pts else np.empty(0)
    r = r[(r >= 0.0) & (r <= 1.0)]
    return np.unique(np.round(r, 14))


def default_r_samples(grid: CategoricalGrid, n=101, max_kinks=64) -> np.ndarray:
    """Equispaced rewards plus up to ``max_kinks`` evenly chosen kink points."""
    base = np.linspace(0.0, 1.0, n)
    kinks = kink_points(grid)
    if kinks.size > max_kinks:
        kinks = kinks[np.linspace(0, kinks.size - 1, max_kinks).round().astype(int)]
    return np.unique(np.concatenate([base, kinks]))


def spectral_contraction_check(grid: CategoricalGrid, r_samples=None) -> float:
    """Largest spectral norm of C Gt(r) C^{-1} over the sampled rewards."""
    if r_samples is None:
        r_samples = default_r_samples(grid)
    return max(spectral_norm(projected_bellman_matrix(float(r), grid)) for r in r_samples)


def preconditioned_contraction_check(grid: CategoricalGrid, r_samples=None) -> float:
    """Largest spectral norm of (C^T C)^{1/2} Gt(r) (C^T C)^{-1/2}."""
    if r_samples is None:
        r_samples = default_r_samples(grid)
    ctc = ctc_matrix(grid.K)
    half = sqrtm_psd(ctc)
    half_inv = sqrtm_psd(ctc, inverse=True)
    return max(spectral_norm(half @ build_shift_kernel(float(r), grid).Gtilde @ half_inv)
               for r in r_samples)


def ctc_spectrum_numeric(K: int) -> np.ndarray:
    w, _ = eig_sym(symmetrize(ctc_matrix(K)))
    return w
