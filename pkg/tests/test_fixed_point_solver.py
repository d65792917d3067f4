import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from distrib_td import linalg_core as la
from distrib_td.categorical_measures import CategoricalGrid
from distrib_td.fixed_point_solver import (IllConditionedError, PsiParam, ThetaParam, apply_projected_operator,
                                           approximation_error_report, assemble_system, bellman_targets,
                                           fixed_point_residual, iterate_projected_operator, mu_l2_distance,
                                           mu_w1_distance, project_to_span, solve_psi_star, solve_theta_star,
                                           tabular_fixed_point, value_of, value_of_psi)
from distrib_td.mdp_model import FeatureMap, feature_covariance, make_experiment_mdp, stationary_distribution
from distrib_td.stability_diagnostics import enumerate_outcomes, sample_matrices


def test_theta_param_layout(grid16):
    Theta = np.arange(32.0).reshape(2, 16)
    th = ThetaParam(grid16, Theta)
    assert np.array_equal(ThetaParam.from_vector(grid16, th.theta, 2).Theta, Theta)
    assert th.theta[:2].tolist() == [0.0, 16.0]
    with pytest.raises(ValueError):
        ThetaParam(grid16, np.zeros((2, 15)))


def test_zero_parameter_is_uniform(small_model, grid16):
    m, f = small_model
    P = ThetaParam.zeros(grid16, f.d).pmfs(f)
    assert np.allclose(P, 1.0 / 17)


def test_from_pmfs_round_trip(small_model, grid16):
    m, f = small_model
    P = np.random.default_rng(0).dirichlet(np.ones(17), size=3).T[:16]
    assert np.allclose(ThetaParam.from_pmfs(grid16, P, f).pmfs(f), P, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 50), st.integers(2, 20), st.integers(0, 2**31 - 1))
def test_isometry_with_kronecker_norm(seed, K, pseed):
    m, f = make_experiment_mdp(seed)
    grid = CategoricalGrid(K, m.gamma)
    r = np.random.default_rng(pseed)
    a = ThetaParam(grid, r.normal(size=(f.d, K)))
    b = ThetaParam(grid, r.normal(size=(f.d, K)))
    diff = a.theta - b.theta
    Sigma = feature_covariance(m, f)
    lhs = (1 - m.gamma) * mu_l2_distance(a, b, m, f) ** 2
    rhs = diff @ la.kron(np.eye(K), Sigma) @ diff / K
    assert lhs == pytest.approx(rhs, rel=1e-10)
    assert mu_w1_distance(a, b, m, f) <= math.sqrt(grid.upper) * mu_l2_distance(a, b, m, f) + 1e-12


def test_system_matches_sample_average(small_model, grid16):
    m, f = small_model
    sys = assemble_system(m, f, grid16)
    A = sum(w * sample_matrices(s, r, n, f, grid16)[0] for w, s, r, n in enumerate_outcomes(m))
    b = sum(w * sample_matrices(s, r, n, f, grid16)[1] for w, s, r, n in enumerate_outcomes(m))
    assert np.allclose(sys.Abar, A, atol=1e-13)
    assert np.allclose(sys.bbar, b, atol=1e-13)


@pytest.mark.parametrize("seed,K", [(0, 8), (1, 16), (2, 33), (3, 5)])
def test_fixed_point_solution_and_iteration(seed, K):
    m, f = make_experiment_mdp(seed)
    grid = CategoricalGrid(K, m.gamma)
    sys = assemble_system(m, f, grid)
    theta = solve_theta_star(sys)
    assert fixed_point_residual(sys, theta) <= 1e-10 * (1 + np.linalg.norm(sys.bbar))
    assert np.allclose(apply_projected_operator(theta, m, f).Theta, theta.Theta, atol=1e-11)
    it, gaps = iterate_projected_operator(m, f, grid)
    assert np.allclose(it.Theta, theta.Theta, atol=1e-9)
    ratios = [b / a for a, b in zip(gaps, gaps[1:]) if a > 1e-10]
    assert max(ratios) <= math.sqrt(m.gamma) + 1e-6


def test_three_way_pythagoras(small_model, grid16):
    m, f = small_model
    r = np.random.default_rng(3)
    P = r.normal(size=(16, m.S)) * 0.05
    proj = project_to_span(P, m, f, grid16)
    other = ThetaParam(grid16, r.normal(size=(f.d, 16)))
    mu = stationary_distribution(m)
    off = (np.arange(1, 17) / 17)[:, None]

    def dist_sq(F1, F2):
        return grid16.iota * float(mu @ ((F1 - F2) ** 2).sum(axis=0))

    F_target = np.cumsum(P, axis=0)
    lhs = dist_sq(F_target, other.cdfs(f))
    rhs = dist_sq(F_target, proj.cdfs(f)) + dist_sq(proj.cdfs(f), other.cdfs(f))
    assert lhs == pytest.approx(rhs, rel=1e-10)
    assert np.allclose(proj.cdfs(f) - off, (proj.Theta.T @ f.Phi))


@pytest.mark.parametrize("K", [4, 12])
def test_tabular_features_recover_the_tabular_fixed_point(K):
    m, _ = make_experiment_mdp(4)
    f = FeatureMap.one_hot(m.S)
    grid = CategoricalGrid(K, m.gamma)
    theta = solve_theta_star(assemble_system(m, f, grid))
    P = tabular_fixed_point(m, grid)
    assert np.allclose(theta.pmfs(f), P, atol=1e-12)
    assert np.allclose(bellman_targets(P, m, grid), P, atol=1e-13)


def test_tabular_means_are_the_true_values():
    m, _ = make_experiment_mdp(5)
    f = FeatureMap.one_hot(m.S)
    grid = CategoricalGrid(20, m.gamma)
    theta = solve_theta_star(assemble_system(m, f, grid))
    V = np.linalg.solve(np.eye(m.S) - m.gamma * m.transition_matrix(), m.mean_reward())
    assert np.allclose(value_of(theta, f), V, atol=1e-12)
    assert np.allclose(value_of_psi(solve_psi_star(m, f), f), V, atol=1e-12)


def test_psi_star_solves_projected_equation(small_model):
    m, f = small_model
    psi = solve_psi_star(m, f).psi
    mu = stationary_distribution(m)
    V = f.Phi.T @ psi
    target = m.mean_reward() + m.gamma * m.transition_matrix() @ V
    # orthogonality of the Bellman residual to the features in the mu inner product
    assert np.allclose((f.Phi * mu) @ (target - V), 0.0, atol=1e-13)
    assert isinstance(solve_psi_star(m, f), PsiParam)


def test_means_agree_with_linear_td_when_constants_are_representable():
    m, f0 = make_experiment_mdp(6, S=4, d=3)
    Phi = np.vstack([np.ones(m.S), f0.Phi[:2]])
    f = FeatureMap.normalized(Phi)
    grid = CategoricalGrid(24, m.gamma)
    theta = solve_theta_star(assemble_system(m, f, grid))
    assert np.allclose(value_of(theta, f), value_of_psi(solve_psi_star(m, f), f), atol=1e-10)


def test_ill_conditioned_features_raise():
    m, _ = make_experiment_mdp(0)
    Phi = np.array([[1.0, 0.5, 0.2], [1.0, 0.5, 0.2]]) / 2
    f = FeatureMap(Phi)
    with pytest.raises(np.linalg.LinAlgError):
        assemble_system(m, f, CategoricalGrid(4, m.gamma))
    with pytest.raises(IllConditionedError):
        solve_psi_star(m, f)


def test_assemble_rejects_mismatches(small_model):
    m, f = small_model
    with pytest.raises(ValueError):
        assemble_system(m, f, CategoricalGrid(4, 0.5))
    with pytest.raises(ValueError):
        assemble_system(m, FeatureMap.one_hot(4), CategoricalGrid(4, m.gamma))


def test_approximation_error_report(small_model):
    m, f = small_model
    grid = CategoricalGrid(8, m.gamma)
    rep = approximation_error_report(m, f, grid, K_ref=128)
    assert rep["holds"]
    assert rep["lhs_w1_sq"] >= 0
    with pytest.raises(ValueError):
        approximation_error_report(m, f, grid, K_ref=60)
