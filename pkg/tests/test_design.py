from __future__ import annotations

import numpy as np
import pytest

from conftest import random_environment, random_policy, random_simplex
from oracles import direct_pe_loss, grid_search_pe_design
from pedesign.design import (
    DesignWeights,
    Objective,
    SingularDesignError,
    allocate,
    corollary1_bounds,
    design_matrix,
    gradient_bound,
    kw_certificate,
    loss_bounds_from_moment,
    pe_loss,
    pe_loss_gradient,
    solve_design,
)
from pedesign.model import fixture_env_E, fixture_tabular2


def test_design_weights_validation():
    with pytest.raises(ValueError):
        DesignWeights(np.array([0.5, 0.6]))
    with pytest.raises(ValueError):
        DesignWeights(np.array([1.5, -0.5]))


def test_design_matrix_one_hot_uniform():
    bundle = design_matrix(np.full(3, 1 / 3), np.eye(3), np.ones(3))
    assert np.allclose(bundle.a_mat, np.eye(3) / 3)
    assert np.allclose(bundle.a_mat @ bundle.a_inv, np.eye(3), atol=1e-8)


def test_design_matrix_env_E():
    env, _ = fixture_env_E()
    bundle = design_matrix(np.array([0.5, 0.5, 0.0]), env.features, env.variances())
    assert np.allclose(bundle.a_mat, np.diag([0.5, 0.5]))


def test_design_matrix_singular_support():
    with pytest.raises(SingularDesignError):
        design_matrix(np.array([1.0, 0.0]), np.array([[1.0, 0.0], [0.0, 1.0]]), np.ones(2))


def test_pe_loss_scalar_case():
    loss = pe_loss(np.array([1.0]), np.array([1.0]), np.array([1.0]), np.array([[1.0]]), n=10)
    assert loss == pytest.approx(0.1)


def test_pe_loss_tabular_closed_form(rng):
    for _ in range(10):
        dim = int(rng.integers(2, 5))
        variances = rng.uniform(0.2, 2.0, size=dim)
        pi = random_simplex(rng, dim)
        b = random_simplex(rng, dim) + 0.05
        b /= b.sum()
        loss = pe_loss(pi, b, variances, np.eye(dim), n=7)
        expected = np.sum(pi**2 * variances / b) / 7
        assert loss == pytest.approx(expected, rel=1e-10)
        assert loss == pytest.approx(direct_pe_loss(pi, b, variances, np.eye(dim), 7), rel=1e-10)


def test_pe_loss_nonnegative_and_matches_direct(rng):
    for _ in range(10):
        env = random_environment(rng, 3, 8)
        pi = random_policy(rng, 8)
        b = random_simplex(rng, 8) + 0.02
        b /= b.sum()
        loss = pe_loss(pi, b, env.variances(), env.features, n=11)
        assert loss >= 0
        assert loss == pytest.approx(
            direct_pe_loss(pi.probs, b, env.variances(), env.features, 11), rel=1e-9
        )


def test_gradient_matches_finite_differences(rng):
    for _ in range(10):
        dim = int(rng.integers(2, 4))
        n_actions = int(rng.integers(dim + 1, 9))
        env = random_environment(rng, dim, n_actions)
        pi = random_policy(rng, n_actions)
        b = random_simplex(rng, n_actions) + 0.05
        b /= b.sum()
        grad = pe_loss_gradient(pi, b, env.variances(), env.features)
        assert np.all(grad <= 0)
        step = 1e-6
        for a in range(n_actions):
            up, down = b.copy(), b.copy()
            up[a] += step
            down[a] -= step
            fd = (
                direct_pe_loss(pi.probs, up, env.variances(), env.features)
                - direct_pe_loss(pi.probs, down, env.variances(), env.features)
            ) / (2 * step)
            assert grad[a] == pytest.approx(fd, rel=1e-5)


def test_gradient_tabular_entries(rng):
    dim = 3
    variances = rng.uniform(0.2, 2.0, size=dim)
    pi = random_simplex(rng, dim)
    b = random_simplex(rng, dim) + 0.1
    b /= b.sum()
    grad = pe_loss_gradient(pi, b, variances, np.eye(dim))
    assert grad == pytest.approx(-(pi**2) * variances / b**2, rel=1e-10)


def test_gradient_change_respects_bound(rng):
    for _ in range(20):
        dim = int(rng.integers(2, 4))
        n_actions = int(rng.integers(dim + 1, 8))
        env = random_environment(rng, dim, n_actions)
        pi = random_policy(rng, n_actions)
        b1 = random_simplex(rng, n_actions) + 0.05
        b1 /= b1.sum()
        b2 = random_simplex(rng, n_actions) + 0.05
        b2 /= b2.sum()
        g1 = pe_loss_gradient(pi, b1, env.variances(), env.features)
        g2 = pe_loss_gradient(pi, b2, env.variances(), env.features)
        bound = gradient_bound(pi, b1, b2, env.variances(), env.features)
        assert np.all(np.abs(g1 - g2) <= bound + 1e-9)


def test_convexity_along_segments(rng):
    for _ in range(30):
        env = random_environment(rng, 2, 6)
        pi = random_policy(rng, 6)
        b1 = random_simplex(rng, 6) + 0.05
        b1 /= b1.sum()
        b2 = random_simplex(rng, 6) + 0.05
        b2 /= b2.sum()
        lam = float(rng.uniform())
        mix = lam * b1 + (1 - lam) * b2
        left = pe_loss(pi, mix, env.variances(), env.features, 1)
        right = lam * pe_loss(pi, b1, env.variances(), env.features, 1) + (1 - lam) * pe_loss(
            pi, b2, env.variances(), env.features, 1
        )
        assert left <= right + 1e-9


def test_solve_design_tabular_matches_grid_oracle():
    env, pi = fixture_tabular2()
    result = solve_design(Objective("pe"), env.features, env.variances(), pi, epsilon=1e-9)
    grid_b, grid_loss = grid_search_pe_design(pi.probs, env.variances(), env.features)
    assert np.max(np.abs(result.weights.probs - grid_b)) <= 1e-3
    # proportional to pi * sigma, not the printed pi^2 sigma^2 rule
    assert result.weights.probs == pytest.approx([1 / 3, 2 / 3], abs=1e-6)


def test_solve_design_env_E_matches_grid_oracle():
    env, pi = fixture_env_E()
    result = solve_design(Objective("pe"), env.features, env.variances(), pi, epsilon=1e-9)
    grid_b, _ = grid_search_pe_design(pi.probs, env.variances(), env.features)
    assert np.max(np.abs(result.weights.probs - grid_b)) <= 1e-3


def test_solve_design_d_optimal_one_hot_uniform():
    result = solve_design(Objective("d", heteroscedastic=False), np.eye(4), epsilon=1e-9)
    assert result.weights.probs == pytest.approx(np.full(4, 0.25), abs=1e-6)


def test_solve_design_scale_invariance(rng):
    env = random_environment(rng, 3, 10, unit_norm=True)
    pi = random_policy(rng, 10)
    scale = 2.5
    base = solve_design(Objective("pe"), env.features, env.variances(), pi, epsilon=1e-9)
    scaled = solve_design(
        Objective("pe"), scale * env.features, scale**2 * env.variances(), pi, epsilon=1e-9
    )
    assert np.max(np.abs(base.weights.probs - scaled.weights.probs)) < 1e-4


def test_solve_design_monotone_iterates():
    env, pi = fixture_env_E()
    values = []
    for k in range(1, 12):
        result = solve_design(
            Objective("pe"), env.features, env.variances(), pi, epsilon=1e-14, max_iter=k
        )
        values.append(pe_loss(pi, result.weights, env.variances(), env.features, 1))
    for earlier, later in zip(values, values[1:]):
        assert later <= earlier + 1e-9


def test_solve_design_gap_is_valid_certificate():
    env, pi = fixture_env_E()
    _, grid_loss = grid_search_pe_design(pi.probs, env.variances(), env.features, resolution=1e-3)
    for k in (1, 2, 4, 8):
        result = solve_design(
            Objective("pe"), env.features, env.variances(), pi, epsilon=1e-14, max_iter=k
        )
        achieved = pe_loss(pi, result.weights, env.variances(), env.features, 1)
        assert result.gap >= achieved - grid_loss - 1e-6


def test_solve_design_flags_non_convergence():
    env, pi = fixture_env_E()
    result = solve_design(Objective("pe"), env.features, env.variances(), pi,
                          epsilon=1e-12, max_iter=1)
    assert not result.converged
    assert result.gap > 1e-12


def test_solve_design_requires_policy_for_pe():
    env, _ = fixture_env_E()
    with pytest.raises(ValueError):
        solve_design(Objective("pe"), env.features, env.variances(), None)


def test_solve_design_rejects_nonspanning_features():
    features = np.array([[1.0, 0.0], [2.0, 0.0]])
    with pytest.raises(SingularDesignError):
        solve_design(Objective("d", heteroscedastic=False), features)


def test_kw_trace_identity(rng):
    for _ in range(20):
        dim = int(rng.integers(2, 5))
        n_actions = int(rng.integers(dim + 1, 12))
        env = random_environment(rng, dim, n_actions)
        b = random_simplex(rng, n_actions) + 0.02
        b /= b.sum()
        certificate = kw_certificate(b, env.features, env.variances())
        assert certificate.weighted_avg_norm == pytest.approx(dim, abs=1e-8)


def test_kw_certificate_d_optimal(rng):
    features = rng.normal(size=(20, 3))
    result = solve_design(Objective("d", heteroscedastic=False), features, epsilon=1e-7,
                          max_iter=100000)
    certificate = kw_certificate(result.weights, features, None)
    assert 3.0 - 1e-9 <= certificate.max_norm <= 3.0 + 1e-3
    assert certificate.support_size <= 6


def test_loss_bounds_identity_moment():
    low, high = loss_bounds_from_moment(np.eye(3), 3, 10)
    assert (low, high) == pytest.approx((0.3, 0.3))


def test_corollary1_rank_one_lower_bound_is_zero():
    env, pi = fixture_env_E()
    low, high = corollary1_bounds(pi, env.features, 100)
    assert low == pytest.approx(0.0, abs=1e-12)
    z = env.features.T @ pi.probs
    assert high == pytest.approx(float(z @ z) * 2 / 100)


def test_corollary1_sandwich_at_trace_optimal_design(rng):
    for _ in range(3):
        env = random_environment(rng, 3, 20, unit_norm=True)
        pi = random_policy(rng, 20)
        result = solve_design(Objective("a"), env.features, env.variances(), epsilon=1e-6,
                              max_iter=100000)
        low, high = corollary1_bounds(pi, env.features, 50)
        loss = pe_loss(pi, result.weights, env.variances(), env.features, 50)
        assert low <= loss <= high


def test_allocate_exact_split():
    assert allocate(np.array([0.5, 0.5]), 10).tolist() == [5, 5]


def test_allocate_largest_remainder():
    assert allocate(np.array([0.34, 0.33, 0.33]), 10).tolist() == [4, 3, 3]


def test_allocate_conserves_total(rng):
    for _ in range(1000):
        n_actions = int(rng.integers(2, 8))
        b = random_simplex(rng, n_actions)
        m = int(rng.integers(0, 500))
        counts = allocate(b, m)
        assert counts.sum() == m
        assert counts.min() >= 0


def test_allocate_rejects_negative_total():
    with pytest.raises(ValueError):
        allocate(np.array([1.0]), -1)
