"""Relation-coefficient re-estimation.

Each row ``t`` of the relation matrix solves, independently,

    minimise   sum_i a_i * (r[t, i] + kappa2 * d[t, i]) + kappa1 * ||a||_2
    subject to a on the probability simplex.
"""
from __future__ import annotations

import math
import warnings
from functools import lru_cache
from dataclasses import dataclass

import numpy as np

from . import kernels


class AlphaConvergenceWarning(RuntimeWarning):
    pass


@dataclass
class AlphaProblem:
    r_hat: np.ndarray
    d_hat: np.ndarray
    kappa1: float = 1.0
    kappa2: float = 1.0

    def __post_init__(self):
        self.r_hat = np.asarray(self.r_hat, dtype=np.float64)
        self.d_hat = np.asarray(self.d_hat, dtype=np.float64)
        T = self.r_hat.shape[0]
        if self.r_hat.shape != (T, T) or self.d_hat.shape != (T, T):
            raise ValueError(f"r_hat and d_hat must both be TxT, got {self.r_hat.shape}, {self.d_hat.shape}")
        if not (np.all(np.isfinite(self.r_hat)) and np.all(np.isfinite(self.d_hat))):
            raise ValueError("r_hat and d_hat must be finite")
        if np.any(np.diag(self.d_hat) != 0.0):
            raise ValueError("d_hat must have a zero diagonal")
        if self.kappa1 < 0 or self.kappa2 < 0:
            raise ValueError("kappa1 and kappa2 must be non-negative")

    @property
    def num_tasks(self):
        return self.r_hat.shape[0]

    def linear_terms(self) -> np.ndarray:
        return self.r_hat + self.kappa2 * self.d_hat


@dataclass
class AlphaSolution:
    alpha: np.ndarray
    objective: float
    iterations: int
    converged: bool


def project_simplex(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("cannot project an empty vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("cannot project a non-finite vector")
    return np.asarray(kernels.project_simplex(v.tolist()))


def _check_feasible(alpha, T, tol=1e-9):
    a = np.asarray(alpha, dtype=np.float64)
    if a.shape != (T, T):
        raise ValueError(f"alpha must be {T}x{T}")
    if np.any(a < -tol) or np.any(np.abs(a.sum(axis=1) - 1.0) > tol):
        raise ValueError("alpha is not row-stochastic")
    return a


def row_objective(a, c, kappa1) -> float:
    return float(np.dot(c, a) + kappa1 * np.linalg.norm(a))


def alpha_objective(alpha, problem: AlphaProblem) -> float:
    a = _check_feasible(alpha, problem.num_tasks)
    c = problem.linear_terms()
    return float(sum(row_objective(a[t], c[t], problem.kappa1) for t in range(problem.num_tasks)))


def _vertex_row(c):
    row = np.zeros(c.size)
    row[int(np.argmin(c))] = 1.0  # argmin returns the first index on ties
    return row


def solve_alpha(problem: AlphaProblem, tol=1e-10, max_iter=10_000) -> AlphaSolution:
    """Row-wise projected gradient descent started from the uniform matrix.

    The step is 1/L with L = max(||c_t||_inf + kappa1, kappa1 * sqrt(T)); the
    second bound covers the curvature of ``kappa1 * ||a||`` on the simplex,
    where ``||a|| >= 1/sqrt(T)``. With ``kappa1 = 0`` the row problem is a
    linear program and its vertex solution is returned directly.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    T = problem.num_tasks
    c = problem.linear_terms()
    k1 = float(problem.kappa1)
    alpha = np.empty((T, T))
    iterations, converged = 0, True
    uniform = [1.0 / T] * T
    for t in range(T):
        if k1 == 0.0:
            alpha[t] = _vertex_row(c[t])
            continue
        lipschitz = max(float(np.max(np.abs(c[t]))) + k1, k1 * math.sqrt(T))
        row, _, n_iter, ok = kernels.pgd_row(c[t].tolist(), k1, 1.0 / lipschitz, float(tol),
                                             int(max_iter), uniform)
        alpha[t] = row
        iterations = max(iterations, n_iter)
        converged = converged and ok
    if not converged:
        warnings.warn(f"relation solver stopped at max_iter={max_iter}", AlphaConvergenceWarning)
    return AlphaSolution(alpha, alpha_objective(alpha, problem), iterations, converged)


@lru_cache(maxsize=None)
def _compositions(parts: int, n: int) -> np.ndarray:
    """Integer vectors of length ``parts`` with non-negative entries summing to ``n``."""
    if parts == 1:
        return np.array([[n]])
    blocks = []
    for k in range(n + 1):
        rest = _compositions(parts - 1, n - k)
        blocks.append(np.hstack([np.full((rest.shape[0], 1), k), rest]))
    return np.vstack(blocks)


def _grid_size(grid_step):
    n = int(round(1.0 / grid_step))
    if not math.isclose(n * grid_step, 1.0, rel_tol=1e-9):
        raise ValueError("grid_step must divide 1")
    return n


def simplex_grid(T: int, grid_step: float) -> np.ndarray:
    """All points of the simplex whose coordinates are multiples of ``grid_step``."""
    n = _grid_size(grid_step)
    return _compositions(T, n) / n


def brute_force_alpha(problem: AlphaProblem, grid_step=0.005) -> np.ndarray:
    """Exhaustive per-row minimisation over a simplex grid (testing oracle, T <= 4).

    The grid is scanned in slices of fixed first coordinate; the first
    minimiser in scan order wins.
    """
    T = problem.num_tasks
    if T > 4:
        raise ValueError("brute force is limited to T <= 4")
    if grid_step < 1e-3 - 1e-15:
        raise ValueError("grid_step must be at least 1e-3")
    n = _grid_size(grid_step)
    c = problem.linear_terms()
    alpha = np.empty((T, T))
    for t in range(T):
        best, best_point = np.inf, None
        for k in range(n + 1):
            rest = _compositions(T - 1, n - k) if T > 1 else np.zeros((1, 0), dtype=int)
            if T == 1 and k != n:
                continue
            points = np.hstack([np.full((rest.shape[0], 1), k), rest]) / n
            values = points @ c[t] + problem.kappa1 * np.linalg.norm(points, axis=1)
            j = int(np.argmin(values))
            if values[j] < best:
                best, best_point = values[j], points[j]
        alpha[t] = best_point
    return alpha
