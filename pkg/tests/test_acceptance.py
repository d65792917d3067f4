"""Acceptance criteria, each checked at its stated tolerance.

Every test records one PASS/FAIL line (see ``acceptance_log``) before
asserting, so the verdicts are listed at the end of the pytest run.
"""

import math
import os
import time

import numpy as np
import pytest

from distrib_td import experiments as ex
from distrib_td.bellman_matrices import (ctc_spectrum, ctc_spectrum_numeric, default_r_samples,
                                         projected_bellman_matrix)
from distrib_td.categorical_measures import CategoricalGrid, measure_mean, project_categorical
from distrib_td.fixed_point_solver import (ThetaParam, assemble_system, fixed_point_residual,
                                           iterate_projected_operator, solve_theta_star)
from distrib_td.learners import (LearnerConfig, LearnerState, linear_ctd_step, linear_td_step, matched_psi0, run,
                                 tabular_ctd_step, value_of)
from distrib_td.linalg_core import spectral_norm
from distrib_td.mdp_model import FeatureMap, SampleStream, make_experiment_mdp
from distrib_td.stability_diagnostics import biscuit_norm, expected_B_margin, matrix_product_decay, noise_stats

from .acceptance_log import record
from .oracles import projection_oracle, random_general_measure


def test_1_matrix_structure():
    start = time.perf_counter()
    worst = dict(norm=0.0, inf=0.0, one=-math.inf, entry=math.inf, ctc=0.0)
    bad = []
    for g in (0.5, 0.75, 0.9, 0.99):
        for K in (1, 2, 4, 8, 16, 32, 64, 128, 256):
            grid = CategoricalGrid(K, g)
            for r in default_r_samples(grid):
                Y = projected_bellman_matrix(float(r), grid)
                # norms of the matrix acting on row vectors, i.e. of Y^T
                s, inf, one, low = spectral_norm(Y), np.abs(Y.T).sum(axis=1).max(), \
                    np.abs(Y.T).sum(axis=0).max(), Y.min()
                worst["norm"] = max(worst["norm"], s - math.sqrt(g))
                worst["inf"] = max(worst["inf"], abs(inf - g))
                worst["one"] = max(worst["one"], one - 1.0)
                worst["entry"] = min(worst["entry"], low)
                if s > math.sqrt(g) + 1e-10 or low < -1e-14 or abs(inf - g) > 1e-10 or one > 1 + 1e-10:
                    bad.append((K, g, float(r)))
            eigs = ctc_spectrum(K)
            worst["ctc"] = max(worst["ctc"], float(np.max(np.abs(ctc_spectrum_numeric(K) - eigs) / eigs)))
    elapsed = time.perf_counter() - start
    ok = not bad and worst["ctc"] <= 1e-8 and elapsed < 60
    record(1, "matrix structure", ok,
           f"max(||Y||-sqrt(g))={worst['norm']:.2e} max|inf-norm - g|={worst['inf']:.1e} "
           f"max(1-norm - 1)={worst['one']:.1e} min entry={worst['entry']:.1e} "
           f"ctc rel err={worst['ctc']:.1e} time={elapsed:.1f}s")
    assert not bad, bad[:5]
    assert worst["ctc"] <= 1e-8
    assert elapsed < 60


def test_2_projection_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    err = mean_err = 0.0
    for i in range(100):
        grid = CategoricalGrid(int(rng.integers(1, 33)), float(rng.choice([0.5, 0.75, 0.9])))
        nu = random_general_measure(rng, grid)
        p = project_categorical(nu, grid)
        err = max(err, float(np.abs(p.p - projection_oracle(nu, grid)).max()))
        mean_err = max(mean_err, abs(measure_mean(p) - nu.mean()))
    elapsed = time.perf_counter() - start
    ok = err <= 1e-6 and mean_err <= 1e-10 and elapsed < 30
    record(2, "projection oracle", ok, f"max mass error={err:.1e} max mean error={mean_err:.1e} time={elapsed:.1f}s")
    assert err <= 1e-6 and mean_err <= 1e-10 and elapsed < 30


def _fixed_point_models():
    for i in range(20):
        S = 2 + i % 4
        d = 1 + (i // 4) % S
        gamma = (0.5, 0.75, 0.9)[i % 3]
        K = (2, 8, 16, 32, 64)[i % 5]
        m, f = make_experiment_mdp(100 + i, S=S, d=d, gamma=gamma)
        yield i, m, f, CategoricalGrid(K, gamma)


def test_3_fixed_point_residuals():
    worst_res = worst_it = worst_ratio = -math.inf
    failures = []
    for i, m, f, grid in _fixed_point_models():
        sys = assemble_system(m, f, grid)
        theta = solve_theta_star(sys)
        res = fixed_point_residual(sys, theta) / (1 + np.linalg.norm(sys.bbar))
        it, gaps = iterate_projected_operator(m, f, grid, tol=1e-13, max_iter=5000)
        dev = float(np.abs(it.theta - theta.theta).max())
        # ratios of tiny gaps only measure round-off
        ratios = [b / a for a, b in zip(gaps, gaps[1:]) if a > 1e-10]
        ratio = max(ratios, default=0.0) - math.sqrt(m.gamma)
        worst_res, worst_it, worst_ratio = max(worst_res, res), max(worst_it, dev), max(worst_ratio, ratio)
        if res > 1e-10 or dev > 1e-9 or ratio > 1e-6:
            failures.append(i)
    ok = not failures
    record(3, "fixed-point residuals", ok,
           f"max residual/(1+|b|)={worst_res:.1e} max iterate gap={worst_it:.1e} "
           f"max(ratio - sqrt(g))={worst_ratio:.1e} over 20 models")
    assert ok, failures


def test_4_tabular_equivalence_and_mean_preservation():
    start = time.perf_counter()
    eq_gap = mean_gap = 0.0
    for seed in range(3):
        m, f0 = make_experiment_mdp(seed)
        grid = CategoricalGrid(30, m.gamma)
        onehot = FeatureMap.one_hot(m.S)
        lin = LearnerState(np.zeros((m.S, grid.K)))
        tab = LearnerState(np.full((grid.K, m.S), 1.0 / (grid.K + 1)))
        f = FeatureMap.normalized(np.vstack([np.ones(m.S), f0.Phi[:2]]))
        ctd = LearnerState(np.zeros((f.d, grid.K)))
        td = LearnerState(matched_psi0(f, grid))
        tr = SampleStream(m, seed).draw(1000)
        for s, r, s2 in zip(tr.s, tr.r, tr.s_next):
            linear_ctd_step(lin, (s, r, s2), onehot, grid, 0.2)
            tabular_ctd_step(tab, (s, r, s2), grid, 0.2)
            eq_gap = max(eq_gap, float(np.abs(ThetaParam(grid, lin.param).pmfs(onehot) - tab.param).max()))
            linear_ctd_step(ctd, (s, r, s2), f, grid, 0.2)
            linear_td_step(td, (s, r, s2), f, 0.2, m.gamma)
            gap = value_of(ctd.param, f, grid) - value_of(td.param, f, algorithm="linear_td")
            mean_gap = max(mean_gap, float(np.abs(gap).max()))
    elapsed = time.perf_counter() - start
    ok = eq_gap <= 1e-12 and mean_gap <= 1e-8 and elapsed < 30
    record(4, "tabular equivalence and mean preservation", ok,
           f"max pmf gap={eq_gap:.1e} max value gap={mean_gap:.1e} time={elapsed:.1f}s (3 x 1000 steps)")
    assert ok


def _stability_models():
    for seed in range(4):
        for gamma, Ks in ((0.75, (4, 8, 16, 32)), (0.9, (10, 20))):
            m, f = make_experiment_mdp(seed, gamma=gamma)
            for K in Ks:
                yield seed, m, f, CategoricalGrid(K, gamma)


def test_5_stability_bounds():
    lines = []
    failures = []
    for seed, m, f, grid in _stability_models():
        assert grid.resolution_ok
        g = m.gamma
        sys = assemble_system(m, f, grid)
        stats = noise_stats(m, f, grid, solve_theta_star(sys), sys)
        keys = ("C_A <= 2(1+sqrt(gamma))", "b_norm <= 3 sqrt(K)(1-gamma)",
                "tr Sigma_e <= 18(|theta*|^2_Sigma + K(1-gamma)^2)")
        checks = [stats.checks[k][0] for k in keys]
        alpha_1 = (1 - math.sqrt(g)) / 38
        margins = [expected_B_margin(sys, m, f, grid, frac * alpha_1) for frac in (0.5, 0.999)]
        bis = biscuit_norm(sys)
        checks += [min(margins) >= -1e-9, bis <= math.sqrt(g) + 1e-9]
        lines.append(min(margins))
        if not all(checks):
            failures.append((seed, g, grid.K, checks))
    ok = not failures
    record(5, "stability bounds", ok, f"{len(lines)} models, min E[B] margin={min(lines):.2e}")
    assert ok, failures


def test_6_convergence_rate():
    start = time.perf_counter()
    m, f = make_experiment_mdp(0)
    grid = CategoricalGrid(64, m.gamma)
    ref = solve_theta_star(assemble_system(m, f, grid)).Theta
    alpha = 0.1 * (1 - math.sqrt(m.gamma))
    T = 20000
    e_T, e_4T = [], []
    for seed in range(16):
        res = run(LearnerConfig(alpha=alpha, T=4 * T, batch=1, seed=seed), m, f, grid, [T, 4 * T], reference=ref)
        rows = {row[0]: row[1] for row in res.trace.rows}
        e_T.append(rows[T])
        e_4T.append(rows[4 * T])
    elapsed = time.perf_counter() - start
    ratio = float(np.mean(e_T) / np.mean(e_4T))
    ok = 1.4 <= ratio <= 2.8 and elapsed < 300
    record(6, "convergence rate", ok, f"error(2e4)={np.mean(e_T):.4g} error(8e4)={np.mean(e_4T):.4g} "
                                      f"ratio={ratio:.3f} (target [1.4, 2.8]) time={elapsed:.0f}s")
    assert ok


def test_7_k_scaling():
    start = time.perf_counter()
    threads = ex.resolve_threads(None if os.environ.get(ex.THREADS_ENV) else os.cpu_count() or 1)
    cfg = ex.ExperimentConfig(k_list=(30, 45, 75, 105, 150), batch=25, max_iter=100000, seeds=(0, 1, 2))
    rep = ex.cmd_k_scaling(cfg, threads)
    elapsed = time.perf_counter() - start
    ok = rep.pmf_fit.r2 >= 0.99 and rep.flatness_ratio <= 2 and not rep.excluded
    inv = ", ".join(f"K={r.K}:{1 / r.alpha_inf:.0f}" for r in rep.pmf)
    record(7, "K scaling", ok, f"PMF 1/alpha_inf {inv}; R^2={rep.pmf_fit.r2:.5f}; CTD max/min="
                               f"{rep.flatness_ratio:.3f}; time={elapsed / 60:.1f} min on {threads} worker(s)")
    assert ok


@pytest.mark.parametrize("t", [50, 100, 200])
def test_8_matrix_product_decay(t):
    start = time.perf_counter()
    m, f = make_experiment_mdp(0)
    grid = CategoricalGrid(30, m.gamma)
    sys = assemble_system(m, f, grid)
    alpha = 0.5 * (1 - math.sqrt(m.gamma)) / (38 * 2)
    est = matrix_product_decay(m, f, grid, alpha, t, trials=2000, p=2.0, seed=t, lambda_min=sys.lambda_min)
    elapsed = time.perf_counter() - start
    ok = est.passed and elapsed < 120
    record(8, f"matrix-product decay t={t}", ok,
           f"estimate={est.estimate:.6f} +- {est.stderr:.1e} envelope={est.envelope:.6f} time={elapsed:.1f}s")
    assert ok
