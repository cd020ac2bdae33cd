"""Pure-Python twins of the compiled kernels in ``_kernels.pyx``.

Both modules expose the same two functions with the same arithmetic order,
so results agree to rounding.
"""
import math


def project_simplex(v):
    """Euclidean projection of a sequence onto the probability simplex (sort and threshold)."""
    n = len(v)
    u = sorted(v, reverse=True)
    cumsum = 0.0
    theta = 0.0
    for k in range(n):
        cumsum += u[k]
        t = (cumsum - 1.0) / (k + 1)
        if u[k] - t > 0.0:
            theta = t
    return [x - theta if x > theta else 0.0 for x in v]


def _row_objective(c, a, kappa1):
    lin = 0.0
    sq = 0.0
    for cj, aj in zip(c, a):
        lin += cj * aj
        sq += aj * aj
    return lin + kappa1 * math.sqrt(sq)


def pgd_row(c, kappa1, step, tol, max_iter, start):
    """Projected gradient descent on ``c . a + kappa1 * ||a||_2`` over the simplex.

    Returns ``(alpha, objective, iterations, converged)``. Iteration stops when
    the objective decrease falls below ``tol``.
    """
    a = list(start)
    n = len(a)
    f = _row_objective(c, a, kappa1)
    for it in range(1, max_iter + 1):
        norm = math.sqrt(sum(x * x for x in a))
        scale = kappa1 / norm if norm > 0.0 else 0.0
        trial = project_simplex([a[j] - step * (c[j] + scale * a[j]) for j in range(n)])
        f_new = _row_objective(c, trial, kappa1)
        if f_new > f:
            return a, f, it, True
        decrease = f - f_new
        a, f = trial, f_new
        if decrease < tol:
            return a, f, it, True
    return a, f, max_iter, False
