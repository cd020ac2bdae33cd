"""Computable terms of the multitask generalization bounds.

For tasks with ``m_t`` labeled samples, ``m = sum m_t`` and ``beta_i = m_i / m``:

    (1/T) sum_t R_alpha_t                       weighted empirical loss
    + C1 * sum_t sqrt(sum_i alpha[t,i]^2 / beta_i)   coefficient regularization
    + (1/T) sum_{t,i} alpha[t,i] * d[t,i]        empirical distance (x 2K for w1)
    + C2                                        complexity (H-divergence form only)

The joint optimal-loss terms lambda are not computable and are reported as such.
The distance term uses the trained-discriminator estimate, not the true divergence.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

NOT_COMPUTABLE = "not computable"


@dataclass
class BoundInputs:
    alpha: np.ndarray
    r_hat: np.ndarray
    d_hat: np.ndarray
    m: Sequence[int]
    vc_dim: float
    delta: float
    metric: str = "hdiv"
    K: Optional[float] = None

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        self.r_hat = np.asarray(self.r_hat, dtype=np.float64)
        self.d_hat = np.asarray(self.d_hat, dtype=np.float64)
        self.m = [int(v) for v in self.m]
        T = len(self.m)
        for name in ("alpha", "r_hat", "d_hat"):
            if getattr(self, name).shape != (T, T):
                raise ValueError(f"{name} must be {T}x{T}")
        if T == 0 or min(self.m) < 1:
            raise ValueError("every task needs m_t >= 1")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.vc_dim < 1:
            raise ValueError("vc_dim must be at least 1")
        if self.metric not in ("hdiv", "w1"):
            raise ValueError("metric must be 'hdiv' or 'w1'")
        if self.metric == "w1" and (self.K is None or self.K <= 0):
            raise ValueError("the w1 bound needs a positive Lipschitz constant K")
        if np.any(self.r_hat < 0) or np.any(self.d_hat < 0):
            raise ValueError("losses and distances must be non-negative")
        if np.any(np.diag(self.d_hat) != 0):
            raise ValueError("d_hat must have a zero diagonal")
        if np.any(self.alpha < -1e-9) or np.any(np.abs(self.alpha.sum(axis=1) - 1) > 1e-9):
            raise ValueError("alpha rows must lie on the simplex")

    @property
    def num_tasks(self):
        return len(self.m)

    @property
    def beta(self) -> np.ndarray:
        m = np.asarray(self.m, dtype=np.float64)
        return m / m.sum()


@dataclass
class BoundReport:
    metric: str
    weighted_empirical_loss: float
    coefficient_regularization: float
    empirical_distance_term: float
    c1: float
    c2: Optional[float]
    total_computable: float

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "weighted_empirical_loss": self.weighted_empirical_loss,
            "coefficient_regularization": self.coefficient_regularization,
            "empirical_distance_term": self.empirical_distance_term,
            "distance_estimate": "empirical discriminator surrogate",
            "c1": self.c1,
            "c2": self.c2 if self.c2 is not None else NOT_COMPUTABLE,
            "lambda_terms": NOT_COMPUTABLE,
            "total_computable": self.total_computable,
        }


def coefficient_regularizer(alpha, beta) -> float:
    """``sum_t sqrt(sum_i alpha[t,i]^2 / beta_i)``."""
    a = np.asarray(alpha, dtype=np.float64)
    b = np.asarray(beta, dtype=np.float64)
    if a.ndim != 2 or b.shape != (a.shape[1],):
        raise ValueError("beta must have one entry per column of alpha")
    if np.any(b <= 0):
        raise ValueError("beta entries must be positive")
    if abs(b.sum() - 1.0) > 1e-9:
        raise ValueError("beta must sum to 1")
    return float(np.sum(np.sqrt(np.sum(a ** 2 / b, axis=1))))


def c1_constant(d, m, T, delta) -> float:
    """``2 sqrt(2 (d log(2 e m / d) + log(16 T / delta)) / m)``."""
    if not (d >= 1 and m > d and T >= 1 and 0 < delta < 1):
        raise ValueError("need d >= 1, m > d, T >= 1 and 0 < delta < 1")
    return 2.0 * math.sqrt(2.0 * (d * math.log(2.0 * math.e * m / d) + math.log(16.0 * T / delta)) / m)


def _c2_term(d, m_ij, T, delta):
    return math.sqrt((2.0 * d * math.log(2.0 * m_ij) + math.log(32.0 * T / delta)) / m_ij)


def c2_constant_thm1(m_list, d, T, delta) -> float:
    """``2 min_{i,j} sqrt((2 d log(2 m_ij) + log(32 T / delta)) / m_ij)``, ``m_ij = min(m_i, m_j)``.

    The minimum runs over all ordered pairs, including ``i = j``.
    """
    m_list = [int(v) for v in m_list]
    if not m_list or min(m_list) < 1:
        raise ValueError("every task needs m_t >= 1")
    if not (d >= 1 and T >= 1 and 0 < delta < 1):
        raise ValueError("need d >= 1, T >= 1 and 0 < delta < 1")
    values = {min(a, b) for a in m_list for b in m_list}
    return 2.0 * min(_c2_term(d, v, T, delta) for v in values)


def weighted_empirical_loss(alpha, r_hat) -> float:
    a = np.asarray(alpha, dtype=np.float64)
    return float(np.sum(a * np.asarray(r_hat, dtype=np.float64)) / a.shape[0])


def empirical_distance_term(alpha, d_hat, metric="hdiv", K=None) -> float:
    a = np.asarray(alpha, dtype=np.float64)
    base = float(np.sum(a * np.asarray(d_hat, dtype=np.float64)) / a.shape[0])
    return 2.0 * K * base if metric == "w1" else base


def bound_decomposition(inputs: BoundInputs) -> BoundReport:
    T = inputs.num_tasks
    m_total = sum(inputs.m)
    c1 = c1_constant(inputs.vc_dim, m_total, T, inputs.delta)
    c2 = c2_constant_thm1(inputs.m, inputs.vc_dim, T, inputs.delta) if inputs.metric == "hdiv" else None
    loss = weighted_empirical_loss(inputs.alpha, inputs.r_hat)
    reg = c1 * coefficient_regularizer(inputs.alpha, inputs.beta)
    dist = empirical_distance_term(inputs.alpha, inputs.d_hat, inputs.metric, inputs.K)
    total = loss + reg + dist + (c2 or 0.0)
    return BoundReport(inputs.metric, loss, reg, dist, c1, c2, total)


def bound_inputs_from_report(report: dict, vc_dim, delta, K=None, epoch=-1) -> BoundInputs:
    """Assemble bound inputs from a training report dictionary."""
    rec = report["epochs"][epoch]
    metric = report["config"]["metric"]
    T = report["num_tasks"]
    d_hat = rec.get("d_hat", np.zeros((T, T)).tolist())
    return BoundInputs(alpha=rec["alpha"], r_hat=rec["r_hat"], d_hat=d_hat, m=report["sample_counts"],
                       vc_dim=vc_dim, delta=delta, metric="hdiv" if metric == "none" else metric, K=K)
