# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for the relation-coefficient solver."""
from libc.math cimport sqrt
from libc.stdlib cimport malloc, free, qsort


cdef int _desc(const void* a, const void* b) noexcept nogil:
    cdef double x = (<double*>a)[0]
    cdef double y = (<double*>b)[0]
    return (x < y) - (x > y)


cdef void _project(double* v, double* out, double* work, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t k
    cdef double cumsum = 0.0, theta = 0.0, t
    for k in range(n):
        work[k] = v[k]
    qsort(work, n, sizeof(double), _desc)
    for k in range(n):
        cumsum += work[k]
        t = (cumsum - 1.0) / (k + 1)
        if work[k] - t > 0.0:
            theta = t
    for k in range(n):
        out[k] = v[k] - theta if v[k] > theta else 0.0


cdef double _objective(double* c, double* a, double kappa1, Py_ssize_t n) noexcept nogil:
    cdef double lin = 0.0, sq = 0.0
    cdef Py_ssize_t j
    for j in range(n):
        lin += c[j] * a[j]
        sq += a[j] * a[j]
    return lin + kappa1 * sqrt(sq)


def project_simplex(v):
    """Euclidean projection of a sequence onto the probability simplex (sort and threshold)."""
    cdef Py_ssize_t n = len(v), k
    cdef double* buf = <double*>malloc(3 * n * sizeof(double))
    if buf == NULL:
        raise MemoryError()
    try:
        for k in range(n):
            buf[k] = v[k]
        _project(buf, buf + n, buf + 2 * n, n)
        return [buf[n + k] for k in range(n)]
    finally:
        free(buf)


def pgd_row(c, double kappa1, double step, double tol, long max_iter, start):
    """Projected gradient descent on ``c . a + kappa1 * ||a||_2`` over the simplex.

    Returns ``(alpha, objective, iterations, converged)``.
    """
    cdef Py_ssize_t n = len(c), j
    cdef long it
    cdef double f, f_new, norm, scale, decrease
    cdef double* buf = <double*>malloc(5 * n * sizeof(double))
    if buf == NULL:
        raise MemoryError()
    cdef double* cc = buf
    cdef double* a = buf + n
    cdef double* step_pt = buf + 2 * n
    cdef double* trial = buf + 3 * n
    cdef double* work = buf + 4 * n
    cdef bint converged = False
    cdef long done = max_iter
    try:
        for j in range(n):
            cc[j] = c[j]
            a[j] = start[j]
        f = _objective(cc, a, kappa1, n)
        with nogil:
            for it in range(1, max_iter + 1):
                norm = 0.0
                for j in range(n):
                    norm += a[j] * a[j]
                norm = sqrt(norm)
                scale = kappa1 / norm if norm > 0.0 else 0.0
                for j in range(n):
                    step_pt[j] = a[j] - step * (cc[j] + scale * a[j])
                _project(step_pt, trial, work, n)
                f_new = _objective(cc, trial, kappa1, n)
                if f_new > f:
                    converged = True
                    done = it
                    break
                decrease = f - f_new
                for j in range(n):
                    a[j] = trial[j]
                f = f_new
                if decrease < tol:
                    converged = True
                    done = it
                    break
        return [a[j] for j in range(n)], f, done, converged
    finally:
        free(buf)
