import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from amtnn import kernels
from amtnn.alpha_solver import (AlphaConvergenceWarning, AlphaProblem, alpha_objective, brute_force_alpha,
                                project_simplex, row_objective, simplex_grid, solve_alpha)


def projection_oracle(v, iters=200):
    """Bisection on the threshold tau with sum(max(v - tau, 0)) = 1."""
    lo, hi = v.min() - 1.0, v.max()
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if np.maximum(v - mid, 0).sum() > 1:
            lo = mid
        else:
            hi = mid
    return np.maximum(v - 0.5 * (lo + hi), 0)


def random_problem(rng, T=3, kappas=(0.0, 0.5, 1.0)):
    d = rng.uniform(0, 2, size=(T, T))
    np.fill_diagonal(d, 0.0)
    return AlphaProblem(rng.uniform(0, 2, size=(T, T)), d, rng.choice(kappas), rng.choice(kappas))


finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=finite))
def test_projection_matches_bisection_oracle(v):
    p = project_simplex(v)
    np.testing.assert_allclose(p, projection_oracle(v), atol=1e-9)
    assert np.all(p >= 0) and abs(p.sum() - 1) < 1e-12


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=finite))
def test_projection_is_idempotent(v):
    p = project_simplex(v)
    np.testing.assert_allclose(project_simplex(p), p, atol=1e-12)


def test_projection_examples():
    np.testing.assert_array_equal(project_simplex([2.0, 0.0, 0.0]), [1.0, 0.0, 0.0])
    np.testing.assert_allclose(project_simplex([0.5, 0.5, 0.5]), [1 / 3] * 3)
    np.testing.assert_allclose(project_simplex([0.2, 0.3, 0.5]), [0.2, 0.3, 0.5])
    with pytest.raises(ValueError):
        project_simplex([])
    with pytest.raises(ValueError):
        project_simplex([np.nan, 1.0])


def test_problem_validation():
    with pytest.raises(ValueError):
        AlphaProblem(np.zeros((2, 2)), np.ones((2, 2)))  # nonzero diagonal
    with pytest.raises(ValueError):
        AlphaProblem(np.zeros((2, 2)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        AlphaProblem(np.zeros((2, 2)), np.zeros((2, 2)), kappa1=-1)
    with pytest.raises(ValueError):
        AlphaProblem(np.full((2, 2), np.inf), np.zeros((2, 2)))


def test_solver_matches_brute_force_on_random_problems():
    rng = np.random.default_rng(0)
    for _ in range(20):
        problem = random_problem(rng)
        sol = solve_alpha(problem)
        grid = brute_force_alpha(problem, grid_step=0.01)
        assert sol.objective <= alpha_objective(grid, problem) + 1e-6
        assert np.all(sol.alpha >= -1e-9)
        np.testing.assert_allclose(sol.alpha.sum(axis=1), 1.0, atol=1e-9)


def test_kappa1_zero_gives_vertex_at_smallest_cost():
    r = np.array([[0.5, 0.2, 0.9], [0.1, 0.4, 0.1], [1.0, 1.0, 0.0]])
    sol = solve_alpha(AlphaProblem(r, np.zeros((3, 3)), kappa1=0.0, kappa2=0.0))
    np.testing.assert_array_equal(sol.alpha, [[0, 1, 0], [1, 0, 0], [0, 0, 1]])


def test_large_kappa1_tends_to_uniform():
    rng = np.random.default_rng(1)
    problem = random_problem(rng)
    problem.kappa1 = 1e4
    sol = solve_alpha(problem)
    np.testing.assert_allclose(sol.alpha, np.full((3, 3), 1 / 3), atol=1e-3)


def test_equal_costs_give_uniform_rows():
    sol = solve_alpha(AlphaProblem(np.ones((4, 4)), np.zeros((4, 4)), kappa1=0.3))
    np.testing.assert_allclose(sol.alpha, np.full((4, 4), 0.25), atol=1e-9)


def test_objective_decreases_monotonically_with_iterations():
    rng = np.random.default_rng(2)
    problem = random_problem(rng, kappas=(0.5, 1.0))
    values = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", AlphaConvergenceWarning)
        for k in range(0, 40):
            values.append(solve_alpha(problem, max_iter=k).objective)
    assert all(b <= a + 1e-15 for a, b in zip(values, values[1:]))


def test_max_iter_cap_warns():
    rng = np.random.default_rng(3)
    problem = random_problem(rng, kappas=(1.0,))
    with pytest.warns(AlphaConvergenceWarning):
        sol = solve_alpha(problem, tol=1e-300, max_iter=1)
    assert not sol.converged


def test_permutation_equivariance():
    rng = np.random.default_rng(4)
    problem = random_problem(rng, kappas=(0.5,))
    perm = np.array([2, 0, 1])
    permuted = AlphaProblem(problem.r_hat[np.ix_(perm, perm)], problem.d_hat[np.ix_(perm, perm)],
                            problem.kappa1, problem.kappa2)
    a = solve_alpha(problem).alpha
    b = solve_alpha(permuted).alpha
    np.testing.assert_allclose(b, a[np.ix_(perm, perm)], atol=1e-6)


def test_row_objective_definition():
    assert row_objective(np.array([0.6, 0.4]), np.array([1.0, 2.0]), 0.5) == pytest.approx(
        1.4 + 0.5 * np.sqrt(0.52))


def test_simplex_grid_counts():
    g = simplex_grid(3, 0.1)
    assert g.shape == (66, 3)
    np.testing.assert_allclose(g.sum(axis=1), 1.0)
    with pytest.raises(ValueError):
        simplex_grid(3, 0.3)


def test_brute_force_limits():
    problem = AlphaProblem(np.zeros((5, 5)), np.zeros((5, 5)))
    with pytest.raises(ValueError):
        brute_force_alpha(problem)


@pytest.mark.skipif(kernels.compiled_impl() is None, reason="compiled kernels not built")
def test_compiled_and_python_kernels_agree():
    compiled, python = kernels.compiled_impl(), kernels.python_impl
    rng = np.random.default_rng(5)
    for _ in range(50):
        v = rng.normal(size=rng.integers(1, 7)).tolist()
        np.testing.assert_allclose(compiled.project_simplex(v), python.project_simplex(v), atol=1e-15)
        c = rng.uniform(0, 2, size=4).tolist()
        a = compiled.pgd_row(c, 0.7, 0.3, 1e-12, 500, [0.25] * 4)
        b = python.pgd_row(c, 0.7, 0.3, 1e-12, 500, [0.25] * 4)
        np.testing.assert_allclose(a[0], b[0], atol=1e-12)
        assert a[2:] == b[2:]
