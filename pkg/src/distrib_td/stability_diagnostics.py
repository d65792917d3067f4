"""Noise and stability quantities of the vectorized Linear-CTD recursion.

In vectorized form one step reads ``theta <- theta - alpha (A_t theta - b_t)``
with

    A_t = I_K kron phi(s) phi(s)^T - Y(r) kron phi(s) phi(s')^T
    b_t = (C (sum_j g_j(r) - 1_K) / (K+1)) kron phi(s)

and ``Y(r) = C Gt(r) C^{-1}``. Everything here enumerates the finite outcome
set exactly, apart from the Monte-Carlo product-decay estimate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import linalg_core as la
from .bellman_matrices import build_shift_kernel, projected_bellman_matrix
from .categorical_measures import CategoricalGrid
from .fixed_point_solver import SystemMatrices, ThetaParam, assemble_system, mu_w1_distance
from .learners import KernelTable
from .mdp_model import FeatureMap, MrpModel, SampleStream, stationary_distribution


def sample_matrices(s, r, s_next, f: FeatureMap, grid: CategoricalGrid):
    """Dense A_t and b_t for one transition."""
    K = grid.K
    phi, phi2 = f.Phi[:, s], f.Phi[:, s_next]
    Y = projected_bellman_matrix(r, grid)
    A = la.kron(np.eye(K), np.outer(phi, phi)) - la.kron(Y, np.outer(phi, phi2))
    b = np.kron(build_shift_kernel(r, grid).b_vec, phi)
    return A, b


def enumerate_outcomes(m: MrpModel):
    """(weight, s, r, s') for every outcome with positive probability."""
    st, _, rw, nx, _ = m.outcome_arrays()
    w = m.joint_weights()
    return [(float(wi), int(s), float(r), int(n)) for wi, s, r, n in zip(w, st, rw, nx) if wi > 0]


@dataclass
class NoiseStats:
    C_A: float
    A_norm_max: float
    b_norm_max: float
    C_e: float
    trace_Sigma_e: float
    theta_star_norm: float
    theta_star_sigma_norm_sq: float
    resolution_ok: bool
    checks: dict = field(default_factory=dict)
    A: list = field(default_factory=list, repr=False)
    e: list = field(default_factory=list, repr=False)

    @property
    def passed(self):
        return all(ok for ok, _, _ in self.checks.values())


def noise_stats(m: MrpModel, f: FeatureMap, grid: CategoricalGrid, theta_star: ThetaParam,
                sys: SystemMatrices | None = None) -> NoiseStats:
    if theta_star is None:
        raise ValueError("theta_star is required")
    sys = assemble_system(m, f, grid) if sys is None else sys
    th = theta_star.theta
    g, K = grid.gamma, grid.K
    C_A = A_max = b_max = C_e = 0.0
    tr_e = 0.0
    As, es = [], []
    for w, s, r, n in enumerate_outcomes(m):
        A, b = sample_matrices(s, r, n, f, grid)
        a_norm = la.spectral_norm(A)
        C_A = max(C_A, a_norm, la.spectral_norm(A - sys.Abar))
        A_max = max(A_max, a_norm)
        b_max = max(b_max, float(np.linalg.norm(b)))
        e = A @ th - b
        C_e = max(C_e, float(np.linalg.norm(e)))
        tr_e += w * float(e @ e)
        As.append((w, A))
        es.append((w, e))
    th_norm = float(np.linalg.norm(th))
    th_sig = float(np.einsum("ik,ij,jk->", theta_star.Theta, sys.SigmaPhi, theta_star.Theta))
    rk = math.sqrt(K) * (1 - g)
    stats = NoiseStats(C_A, A_max, b_max, C_e, tr_e, th_norm, th_sig, grid.resolution_ok, A=As, e=es)
    c = stats.checks
    c["A_norm <= 1+sqrt(gamma)"] = (A_max <= 1 + math.sqrt(g) + 1e-10, A_max, 1 + math.sqrt(g))
    c["C_A <= 2(1+sqrt(gamma))"] = (C_A <= 2 * (1 + math.sqrt(g)) + 1e-10, C_A, 2 * (1 + math.sqrt(g)))
    c["C_A <= 4"] = (C_A <= 4 + 1e-10, C_A, 4.0)
    if grid.resolution_ok:
        c["b_norm <= 3 sqrt(K)(1-gamma)"] = (b_max <= 3 * rk + 1e-10, b_max, 3 * rk)
        c["C_e <= 4(|theta*| + sqrt(K)(1-gamma))"] = (C_e <= 4 * (th_norm + rk) + 1e-10, C_e,
                                                      4 * (th_norm + rk))
        bound = 18 * (th_sig + K * (1 - g) ** 2)
        c["tr Sigma_e <= 18(|theta*|^2_Sigma + K(1-gamma)^2)"] = (tr_e <= bound + 1e-10, tr_e, bound)
    return stats


def biscuit_norm(sys: SystemMatrices) -> float:
    """|| E[Y(r) kron Sigma^{-1/2} phi(s) phi(s')^T Sigma^{-1/2}] ||."""
    K = sys.grid.K
    half_inv = la.sqrtm_psd(sys.SigmaPhi, inverse=True)
    P = la.kron(np.eye(K), half_inv)
    return la.spectral_norm(P @ sys.cross @ P)


@dataclass
class StabilityEntry:
    alpha: float
    p: int
    margin: float
    slack: float
    passed: bool
    label: str


def _check_alpha(alpha, p, g):
    hi = (1 - math.sqrt(g)) / (38 * p)
    if not 0 < alpha < hi:
        raise ValueError(f"alpha={alpha} outside (0, (1-sqrt(gamma))/(38p)) = (0, {hi:.6g})")


def expected_power(m, f, grid, alpha, p):
    """E[((I - alpha A)^T (I - alpha A))^p] by exact enumeration."""
    K, d = grid.K, f.d
    out = np.zeros((d * K, d * K))
    eye = np.eye(d * K)
    for w, s, r, n in enumerate_outcomes(m):
        A, _ = sample_matrices(s, r, n, f, grid)
        M = (eye - alpha * A).T @ (eye - alpha * A)
        out += w * np.linalg.matrix_power(la.symmetrize(M), p)
    return la.symmetrize(out)


def stability_inequality_check(sys: SystemMatrices, m, f, grid, alpha, p, slack=1e-9) -> StabilityEntry:
    """E[((I - alpha A)^T (I - alpha A))^p] <= I - alpha p (1 - sqrt(gamma)) (I kron Sigma) / 2."""
    if p not in (1, 2, 3):
        raise ValueError("exact power check supports p in {1, 2, 3}")
    g = grid.gamma
    _check_alpha(alpha, p, g)
    lhs = expected_power(m, f, grid, alpha, p)
    IS = la.kron(np.eye(grid.K), sys.SigmaPhi)
    rhs = np.eye(lhs.shape[0]) - 0.5 * alpha * p * (1 - math.sqrt(g)) * IS
    margin = la.psd_margin(lhs, rhs)
    return StabilityEntry(alpha, p, margin, slack, margin >= -slack, f"E[(I-aB)^{p}] bound")


def expected_B_margin(sys: SystemMatrices, m, f, grid, alpha) -> float:
    """Smallest eigenvalue of E[B] - (1 - sqrt(gamma)) I kron Sigma, B = A + A^T - alpha A^T A."""
    K, d = grid.K, f.d
    EB = np.zeros((d * K, d * K))
    for w, s, r, n in enumerate_outcomes(m):
        A, _ = sample_matrices(s, r, n, f, grid)
        EB += w * (A + A.T - alpha * A.T @ A)
    IS = la.kron(np.eye(K), sys.SigmaPhi)
    return la.psd_margin((1 - math.sqrt(grid.gamma)) * IS, la.symmetrize(EB))


def expected_AtA_margin(sys: SystemMatrices, m, f, grid) -> float:
    """Smallest eigenvalue of 2(1 + gamma) I kron Sigma - E[A^T A]."""
    K, d = grid.K, f.d
    E = np.zeros((d * K, d * K))
    for w, s, r, n in enumerate_outcomes(m):
        A, _ = sample_matrices(s, r, n, f, grid)
        E += w * A.T @ A
    IS = la.kron(np.eye(K), sys.SigmaPhi)
    return la.psd_margin(la.symmetrize(E), 2 * (1 + grid.gamma) * IS)


def max_B_norm(m, f, grid, alpha) -> float:
    best = 0.0
    for _, s, r, n in enumerate_outcomes(m):
        A, _ = sample_matrices(s, r, n, f, grid)
        best = max(best, la.spectral_norm(A + A.T - alpha * A.T @ A))
    return best


def symmetric_lower_margin(sys: SystemMatrices) -> float:
    """Smallest eigenvalue of Abar + Abar^T - 2(1 - sqrt(gamma)) I kron Sigma."""
    K = sys.grid.K
    IS = la.kron(np.eye(K), sys.SigmaPhi)
    return la.psd_margin(2 * (1 - math.sqrt(sys.grid.gamma)) * IS, la.symmetrize(sys.Abar + sys.Abar.T))


@dataclass
class DecayEstimate:
    t: int
    alpha: float
    p: float
    estimate: float
    stderr: float
    envelope: float
    trials: int
    passed: bool


def decay_rate_constant(grid, lambda_min):
    return (1 - math.sqrt(grid.gamma)) * lambda_min / 2


def matrix_product_decay(m: MrpModel, f: FeatureMap, grid: CategoricalGrid, alpha, t, trials=1000, p=2.0,
                         seed=0, lambda_min=None, sigmas=4.0):
    """Monte-Carlo estimate of E^{1/p} ||Gamma_t u||^p for random unit u.

    ``Gamma_t = (I - alpha A_t) ... (I - alpha A_1)`` over generative
    transitions. The reported standard error comes from the delta method on
    the sample mean of ``||Gamma_t u||^p``; ``p`` is clipped to 8.
    """
    if trials < 1:
        raise ValueError("trials must be positive")
    p = min(float(p), 8.0)
    if lambda_min is None:
        Sigma = (f.Phi * stationary_distribution(m)) @ f.Phi.T
        lambda_min = float(la.eig_sym(la.symmetrize(Sigma))[0][0])
    a = decay_rate_constant(grid, lambda_min)
    envelope = (1 - alpha * a) ** t
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 104729])))
    d, K = f.d, grid.K
    U = rng.standard_normal((trials, d, K))
    U /= np.linalg.norm(U.reshape(trials, -1), axis=1)[:, None, None]
    table = KernelTable(grid, m.reward_levels)
    stream = SampleStream(m, seed, "generative", stream_id=1)
    Phi = f.Phi
    for _ in range(t):
        tr = stream.draw(trials)
        phs, phn = Phi[:, tr.s], Phi[:, tr.s_next]  # d x n
        cur = np.einsum("ndk,dn->kn", U, phs)
        q = np.einsum("ndk,dn->kn", U, phn)
        br = cur - table.apply_Y(q, tr.level)  # K x n, homogeneous part only
        U = U - alpha * np.einsum("dn,kn->ndk", phs, br)
    norms = np.linalg.norm(U.reshape(trials, -1), axis=1) ** p
    mean = float(norms.mean())
    sd = float(norms.std(ddof=1)) if trials > 1 else 0.0
    est = mean ** (1 / p)
    stderr = est / (p * mean) * sd / math.sqrt(trials) if mean > 0 else 0.0
    passed = est <= envelope + sigmas * stderr
    return DecayEstimate(t, alpha, p, est, stderr, envelope, trials, passed)


def error_to_loss_check(theta: ThetaParam, sys: SystemMatrices, theta_star: ThetaParam, m, f, grid):
    """(W1_mu(eta_theta, eta_theta*), 2 K^{-1/2} (1-gamma)^{-2} lambda_min^{-1/2} ||Abar (theta - theta*)||)."""
    lhs = mu_w1_distance(theta, theta_star, m, f)
    g, K = grid.gamma, grid.K
    err = float(np.linalg.norm(sys.Abar @ (theta.theta - theta_star.theta)))
    rhs = 2.0 / (math.sqrt(K) * (1 - g) ** 2 * math.sqrt(sys.lambda_min)) * err
    return lhs, rhs
