"""Scalar objectives: task losses, adversarial losses, gradient penalty, distances.

Sign conventions
----------------
For a pair ``t < i`` the discriminator ``g`` sees features of both tasks.

* ``hdiv``: ``E = mean log g(x_t) + mean log(1 - g(x_i))``. The discriminator
  maximises ``E`` (it minimises the cross entropy ``-E``).
* ``w1``: ``E = mean g(x_t) - mean g(x_i)``. The critic minimises
  ``E + gp_weight * GP``, so a trained critic has ``-E`` close to the
  Wasserstein-1 distance.

In both cases the quantity the discriminator minimises is its
``discriminator_loss``; the shared extractor sees the same loss through a
gradient reversal and therefore maximises it. The min-max objective is
``sum alpha R - rho * sum w L``: for ``hdiv`` the pair term is ``+E``, for
``w1`` it is ``-E`` (the critic's distance estimate) minus the penalty.
"""
from __future__ import annotations

from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as tn
from .model import (AmtnnParams, discriminator_logits, extract_features, head_logits,
                    pair_key)
from .tensor import Tensor

SIMPLEX_TOL = 1e-9


class LossMatrix:
    """``entries[t][i]``: mean cross entropy of head ``t`` on the batch of task ``i``."""

    def __init__(self, entries: List[List[Tensor]]):
        self.entries = entries

    def __getitem__(self, ti):
        t, i = ti
        return self.entries[t][i]

    def __len__(self):
        return len(self.entries)

    @property
    def values(self) -> np.ndarray:
        return np.array([[float(e.data) for e in row] for row in self.entries])


def check_alpha(alpha, num_tasks=None, tol=SIMPLEX_TOL) -> np.ndarray:
    """Return ``alpha`` as an array after checking every row lies on the simplex."""
    a = np.asarray(alpha, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"relation matrix must be square, got shape {a.shape}")
    if num_tasks is not None and a.shape[0] != num_tasks:
        raise ValueError(f"relation matrix is {a.shape[0]}x{a.shape[0]}, expected {num_tasks} tasks")
    if not np.all(np.isfinite(a)) or np.any(a < -tol) or np.any(np.abs(a.sum(axis=1) - 1.0) > tol):
        raise ValueError("every relation-matrix row must be non-negative and sum to 1")
    return a


def cross_entropy(logits, labels) -> Tensor:
    """Mean cross entropy of softmax(logits) against integer labels."""
    logits = tn.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp)
    n, c = logits.shape
    if n == 0:
        raise ValueError("empty batch")
    if labels.shape != (n,):
        raise ValueError(f"{n} rows but {labels.shape} labels")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c})")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    return tn.neg(tn.mean(tn.sum_(tn.mul(tn.log_softmax(logits), onehot), axis=1)))


def task_loss_matrix(batches: Sequence[Tuple[np.ndarray, np.ndarray]], params: AmtnnParams,
                     features: Optional[Sequence[Tensor]] = None) -> LossMatrix:
    """Evaluate every head on every task's batch.

    ``features`` may carry already-extracted features, one per task, to avoid
    running the extractor twice.
    """
    if features is None:
        features = [extract_features(x, params.theta_f) for x, _ in batches]
    T = len(batches)
    entries = []
    for t in range(T):
        head = params.theta_h[t]
        entries.append([cross_entropy(head_logits(features[i], head), batches[i][1])
                        for i in range(T)])
    return LossMatrix(entries)


def weighted_task_loss(r_hat, alpha):
    """Per-task weighted losses ``sum_i alpha[t, i] * r_hat[t, i]`` and their total.

    ``r_hat`` may be a :class:`LossMatrix` (differentiable) or a plain array.
    """
    is_tensor = isinstance(r_hat, LossMatrix)
    T = len(r_hat)
    a = check_alpha(alpha, T)
    per_task = []
    for t in range(T):
        if is_tensor:
            terms = [tn.scalar_mul(r_hat[t, i], a[t, i]) for i in range(T) if a[t, i] != 0.0]
            acc = terms[0]
            for term in terms[1:]:
                acc = tn.add(acc, term)
        else:
            acc = float(np.dot(a[t], np.asarray(r_hat)[t]))
        per_task.append(acc)
    total = per_task[0]
    for v in per_task[1:]:
        total = total + v
    return per_task, total


def _pair_inputs(feat_t, feat_i, reverse):
    feat_t, feat_i = tn.as_tensor(feat_t), tn.as_tensor(feat_i)
    if feat_t.shape[0] == 0 or feat_i.shape[0] == 0:
        raise ValueError("adversarial loss needs two non-empty batches")
    if reverse:
        feat_t, feat_i = tn.gradient_reversal(feat_t), tn.gradient_reversal(feat_i)
    return feat_t, feat_i


def adversarial_loss_h(feat_t, feat_i, params: AmtnnParams, pair, reverse=False) -> Tensor:
    """Mean log-likelihood of the pair's domain discriminator; always <= 0.

    Computed in logit space: log g = -softplus(-z), log(1 - g) = -softplus(z).
    """
    feat_t, feat_i = _pair_inputs(feat_t, feat_i, reverse)
    disc = params.discriminator(*pair)
    z_t = discriminator_logits(feat_t, disc)
    z_i = discriminator_logits(feat_i, disc)
    return tn.add(tn.mean(tn.log_sigmoid(z_t)), tn.mean(tn.log_sigmoid(tn.neg(z_i))))


def critic_scores(feats, params: AmtnnParams, pair, w1_sigmoid=False):
    z = discriminator_logits(feats, params.discriminator(*pair))
    return tn.sigmoid(z) if w1_sigmoid else z


def adversarial_loss_w1(feat_t, feat_i, params: AmtnnParams, pair, reverse=False,
                        w1_sigmoid=False) -> Tensor:
    """Difference of mean critic scores, ``mean g(x_t) - mean g(x_i)``."""
    feat_t, feat_i = _pair_inputs(feat_t, feat_i, reverse)
    return tn.sub(tn.mean(critic_scores(feat_t, params, pair, w1_sigmoid)),
                  tn.mean(critic_scores(feat_i, params, pair, w1_sigmoid)))


def interpolation_plan(n_t: int, n_i: int, seed) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row indices into each batch and mixing weights for the penalty interpolates.

    Both batches are shuffled, paired by position and truncated to the
    shorter one; ``u`` is drawn uniformly on (0, 1).
    """
    rng = np.random.default_rng(seed)
    n = min(n_t, n_i)
    idx_t = rng.permutation(n_t)[:n]
    idx_i = rng.permutation(n_i)[:n]
    u = rng.uniform(0.0, 1.0, size=(n, 1))
    return idx_t, idx_i, u


def gradient_penalty(feat_t, feat_i, params: AmtnnParams, pair, seed, metric="w1",
                     reverse=False, w1_sigmoid=False) -> Tensor:
    """Mean of ``(||grad_x g(x)||_2 - 1)^2`` over random interpolates of the two batches."""
    if metric != "w1":
        raise ValueError("the gradient penalty is only defined for the w1 critic")
    feat_t, feat_i = _pair_inputs(feat_t, feat_i, reverse)
    idx_t, idx_i, u = interpolation_plan(feat_t.shape[0], feat_i.shape[0], seed)
    x_hat = tn.add(tn.mul(tn.take_rows(feat_t, idx_t), u),
                   tn.mul(tn.take_rows(feat_i, idx_i), 1.0 - u))
    if not x_hat.requires_grad:
        x_hat = tn.Tensor(x_hat.data, requires_grad=True)
    scores = critic_scores(x_hat, params, pair, w1_sigmoid)
    # rows are independent, so the gradient of the sum is the per-row gradient
    (dx,) = tn.grad(tn.sum_(scores), [x_hat], create_graph=True)
    return tn.mean(tn.square(tn.sub(tn.l2norm(dx, axis=1), 1.0)))


def discriminator_accuracy(feat_t, feat_i, params: AmtnnParams, pair) -> Tuple[int, int]:
    """(correct, total) for the rule "g(x) > 0.5 means task t" over both batches."""
    disc = params.discriminator(*pair)
    with_t = discriminator_logits(tn.Tensor(tn.as_tensor(feat_t).data), disc).data
    with_i = discriminator_logits(tn.Tensor(tn.as_tensor(feat_i).data), disc).data
    correct = int(np.sum(with_t > 0)) + int(np.sum(with_i <= 0))
    return correct, with_t.size + with_i.size


def discriminator_loss(metric, e_hat, gp=None, gp_weight=1.0):
    """Quantity the pair's discriminator minimises (and the extractor maximises)."""
    if metric == "hdiv":
        return tn.neg(e_hat)
    if metric == "w1":
        return e_hat if gp is None else tn.add(e_hat, tn.scalar_mul(gp, gp_weight))
    raise ValueError(f"unknown metric '{metric}'")


def pair_weight(alpha, t, i) -> float:
    """Coefficient ``alpha[t, i] + alpha[i, t]`` shared by the symmetric pair."""
    a = np.asarray(alpha)
    return float(a[t, i] + a[i, t])


def distance_estimate(metric, statistic) -> float:
    """Distance proxy from epoch statistics of one discriminator.

    hdiv: ``statistic`` is the binary accuracy; returns clamp(2 acc - 1, 0, 1).
    w1: ``statistic`` is the epoch-mean E; returns max(0, -E).
    """
    if metric == "hdiv":
        return float(min(1.0, max(0.0, 2.0 * float(statistic) - 1.0)))
    if metric == "w1":
        return float(max(0.0, -float(statistic)))
    raise ValueError(f"unknown metric '{metric}'")


def distance_matrix(metric, statistics: Dict[Tuple[int, int], float], num_tasks: int) -> np.ndarray:
    """Symmetric distance matrix with an exactly zero diagonal."""
    d = np.zeros((num_tasks, num_tasks))
    for (t, i), stat in statistics.items():
        t, i = pair_key(t, i)
        d[t, i] = d[i, t] = distance_estimate(metric, stat)
    return d


def total_objective(r_hat, alpha, e_hat: Dict[Tuple[int, int], object], rho: float,
                    gp: Optional[Dict[Tuple[int, int], object]] = None, gp_weight=1.0, metric="hdiv"):
    """Min-max objective ``sum_t R_alpha_t - rho * sum_{t<i} (alpha[t,i] + alpha[i,t]) * L_{t,i}``.

    ``L`` is the pair's ``discriminator_loss``: the discriminators maximise
    the objective, the extractor and heads minimise it. For ``hdiv`` the pair
    term is ``+E``; for ``w1`` it is ``-(E + gp_weight * GP)``, the critic's
    distance estimate minus its penalty.
    Values may be tensors (differentiable result) or floats.
    """
    if metric not in ("hdiv", "w1"):
        raise ValueError(f"unknown metric '{metric}'")
    T = len(r_hat)
    a = check_alpha(alpha, T)
    _, total = weighted_task_loss(r_hat, a)
    if T < 2 or rho == 0.0:
        return total
    for (t, i), e in sorted(e_hat.items()):
        w = rho * pair_weight(a, t, i)
        if w == 0.0:
            continue
        if metric == "hdiv":
            term = e
        else:
            term = e if gp is None or (t, i) not in gp else e + gp[(t, i)] * gp_weight
            term = -term
        total = total + (tn.scalar_mul(term, w) if isinstance(term, Tensor) else w * term)
    return total


def training_objective(r_hat: LossMatrix, alpha, disc_losses: Dict[Tuple[int, int], Tensor],
                       rho: float) -> Tensor:
    """Single-backward surrogate: weighted task losses plus weighted discriminator losses.

    ``disc_losses`` must have been computed on reversed features, so one
    descent step trains the discriminators and pushes the extractor the
    other way.
    """
    a = check_alpha(alpha, len(r_hat))
    _, total = weighted_task_loss(r_hat, a)
    for (t, i), loss in sorted(disc_losses.items()):
        w = rho * pair_weight(a, t, i)
        total = tn.add(total, tn.scalar_mul(loss, w))
    return total
