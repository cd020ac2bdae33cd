"""Alternating optimisation of network parameters and task relation coefficients.

One epoch runs the minibatch loop: for every step each task contributes one
batch, the weighted task losses and the pairwise discriminator losses are
summed into a single surrogate, and one backward pass through gradient
reversal gives descent directions for the extractor and heads and the
adversarial direction for the discriminators. After the epoch the relation
matrix is re-estimated from the epoch-averaged loss and distance matrices.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import losses as L
from . import tensor as tn
from .alpha_solver import AlphaProblem, solve_alpha
from .data import TaskDataset, check_tasks, cycling_batches, subsample
from .model import (AmtnnParams, Architecture, extract_features, head_logits, init_params)

METRICS = ("hdiv", "w1", "none")
ALPHA_MODES = ("uniform-fixed", "identity-fixed", "solved")

# method -> (metric, alpha_mode, overrides)
PRESETS = {
    "mtl_uni": ("none", "identity-fixed", {}),
    "mtl_weighted": ("none", "solved", {"kappa2": 0.0}),
    "mtl_disH": ("hdiv", "uniform-fixed", {}),
    "mtl_disW": ("w1", "uniform-fixed", {}),
    "amtnn_h": ("hdiv", "solved", {}),
    "amtnn_w": ("w1", "solved", {}),
}


class TrainingDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    metric: str = "w1"
    alpha_mode: str = "solved"
    rho: Optional[float] = None  # None means 1/T
    kappa1: float = 1.0
    kappa2: float = 1.0
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    gp_weight: float = 1.0
    critic_steps: int = 1
    w1_sigmoid_output: bool = False
    equalize_sizes: bool = True
    solver_tol: float = 1e-10
    solver_max_iter: int = 10_000

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")
        if self.alpha_mode not in ALPHA_MODES:
            raise ValueError(f"alpha_mode must be one of {ALPHA_MODES}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1 or self.critic_steps < 1:
            raise ValueError("epochs, batch_size and critic_steps must be at least 1")
        if self.rho is not None and self.rho < 0:
            raise ValueError("rho must be non-negative")
        if self.kappa1 < 0 or self.kappa2 < 0 or self.gp_weight < 0:
            raise ValueError("kappa1, kappa2 and gp_weight must be non-negative")

    @classmethod
    def preset(cls, method: str, **overrides) -> "TrainConfig":
        try:
            metric, mode, extra = PRESETS[method]
        except KeyError:
            raise ValueError(f"unknown method '{method}', expected one of {sorted(PRESETS)}") from None
        return cls(**{"metric": metric, "alpha_mode": mode, **overrides, **extra})

    def rho_for(self, num_tasks: int) -> float:
        return 1.0 / num_tasks if self.rho is None else float(self.rho)


@dataclass
class OptimizerState:
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)


def sgd_momentum_step(params: Dict[str, tn.Tensor], grads, state: OptimizerState, lr, momentum):
    """In place: ``v <- momentum * v + g``, ``p <- p - lr * v``."""
    for name, p in params.items():
        g = grads[name]
        g = g.data if isinstance(g, tn.Tensor) else np.asarray(g)
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        elif v.shape != p.shape:
            raise ValueError(f"{name}: velocity shape {v.shape} != parameter shape {p.shape}")
        v = momentum * v + g
        state.velocity[name] = v
        p.data = p.data - lr * v
    return params, state


def initial_alpha(mode: str, num_tasks: int) -> np.ndarray:
    if mode == "identity-fixed":
        return np.eye(num_tasks)
    return np.full((num_tasks, num_tasks), 1.0 / num_tasks)


# ---------------------------------------------------------------------------
# one step

@dataclass
class StepResult:
    surrogate: tn.Tensor
    r_hat: np.ndarray
    e_hat: Dict[Tuple[int, int], float]
    gp: Dict[Tuple[int, int], float]
    correct: Dict[Tuple[int, int], Tuple[int, int]]
    train_hits: List[Tuple[int, int]]
    objective: float


def step_objective(params: AmtnnParams, batches, alpha, config: TrainConfig, rho: float,
                   gp_seed=(0,), reverse=True) -> StepResult:
    """Forward pass for one aligned set of batches.

    ``surrogate`` is what the optimiser differentiates. ``objective`` is the
    value of the min-max objective itself (the reversal is the identity on
    the forward pass, but the surrogate carries discriminator losses).
    """
    T = len(batches)
    feats = [extract_features(x, params.theta_f) for x, _ in batches]
    r = L.task_loss_matrix(batches, params, feats)
    disc_losses, e_hat, gp_vals, correct = {}, {}, {}, {}
    if config.metric != "none" and T >= 2:
        for pair in params.pairs():
            t, i = pair
            if config.metric == "hdiv":
                e = L.adversarial_loss_h(feats[t], feats[i], params, pair, reverse=reverse)
                gp = None
            else:
                e = L.adversarial_loss_w1(feats[t], feats[i], params, pair, reverse=reverse,
                                          w1_sigmoid=config.w1_sigmoid_output)
                gp = None
                if config.gp_weight > 0:
                    # the penalty constrains the critic only; the extractor must not see it
                    gp = L.gradient_penalty(feats[t].detach(), feats[i].detach(), params, pair,
                                            seed=[*gp_seed, t, i], w1_sigmoid=config.w1_sigmoid_output)
                    gp_vals[pair] = gp.item()
            disc_losses[pair] = L.discriminator_loss(config.metric, e, gp, config.gp_weight)
            e_hat[pair] = e.item()
            correct[pair] = L.discriminator_accuracy(feats[t], feats[i], params, pair)
    surrogate = L.training_objective(r, alpha, disc_losses, rho)
    r_vals = r.values
    objective = L.total_objective(r_vals, alpha, e_hat, rho, gp_vals or None, config.gp_weight,
                                  metric=config.metric if config.metric != "none" else "hdiv")
    hits = []
    for t, (_, y) in enumerate(batches):
        pred = np.argmax(head_logits(tn.Tensor(feats[t].data), params.theta_h[t]).data, axis=1)
        hits.append((int(np.sum(pred == y)), int(y.size)))
    return StepResult(surrogate, r_vals, e_hat, gp_vals, correct, hits, float(objective))


def _critic_only_update(params, batches, alpha, config, rho, state, gp_seed):
    """Extra discriminator step on frozen features (``critic_steps > 1``)."""
    feats = [extract_features(x, params.theta_f).detach() for x, _ in batches]
    total = None
    for pair in params.pairs():
        t, i = pair
        if config.metric == "hdiv":
            e = L.adversarial_loss_h(feats[t], feats[i], params, pair)
            gp = None
        else:
            e = L.adversarial_loss_w1(feats[t], feats[i], params, pair,
                                      w1_sigmoid=config.w1_sigmoid_output)
            gp = (L.gradient_penalty(feats[t], feats[i], params, pair, seed=[*gp_seed, t, i],
                                     w1_sigmoid=config.w1_sigmoid_output)
                  if config.gp_weight > 0 else None)
        term = tn.scalar_mul(L.discriminator_loss(config.metric, e, gp, config.gp_weight),
                             rho * L.pair_weight(alpha, t, i))
        total = term if total is None else tn.add(total, term)
    named = {k: v for k, v in params.named().items() if k.startswith("d")}
    if total is None or not total.requires_grad:
        return
    sgd_momentum_step(named, tn.backward(total, named), state, config.lr, config.momentum)


def _train_step(params, batches, alpha, config, rho, state, gp_seed, named):
    extra = config.critic_steps - 1 if config.metric != "none" else 0
    for k in range(extra):
        _critic_only_update(params, batches, alpha, config, rho, state, [*gp_seed, 1000 + k])
    res = step_objective(params, batches, alpha, config, rho, gp_seed=gp_seed)
    return res, tn.backward(res.surrogate, named)


# ---------------------------------------------------------------------------
# epochs

@dataclass
class EpochStats:
    epoch: int
    objective: float
    r_hat: np.ndarray
    e_hat: Dict[Tuple[int, int], float]
    gp: Dict[Tuple[int, int], float]
    disc_accuracy: Dict[Tuple[int, int], float]
    d_hat: np.ndarray
    train_accuracy: List[float]
    steps: int


def steps_per_epoch(datasets: Sequence[TaskDataset], batch_size: int) -> int:
    return max(math.ceil(d.m / batch_size) for d in datasets)


def train_epoch(params: AmtnnParams, datasets: Sequence[TaskDataset], alpha, config: TrainConfig,
                epoch_index: int, state: Optional[OptimizerState] = None) -> EpochStats:
    """One pass over the longest task; shorter tasks cycle. Updates ``params`` in place."""
    state = state if state is not None else OptimizerState()
    T = len(datasets)
    rho = config.rho_for(T)
    alpha = L.check_alpha(alpha, T)
    iters = [cycling_batches(d.train, config.batch_size, [config.seed, t], epoch_index)
             for t, d in enumerate(datasets)]
    n_steps = steps_per_epoch(datasets, config.batch_size)
    named = params.named()

    r_sum = np.zeros((T, T))
    e_sum: Dict[Tuple[int, int], float] = {}
    gp_sum: Dict[Tuple[int, int], float] = {}
    hits: Dict[Tuple[int, int], List[int]] = {}
    train_hits = np.zeros((T, 2), dtype=np.int64)
    obj_sum = 0.0
    for step in range(n_steps):
        batches = [next(it) for it in iters]
        gp_seed = [config.seed, epoch_index, step]
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                res, grads = _train_step(params, batches, alpha, config, rho, state, gp_seed, named)
        except tn.NonFiniteError as exc:
            raise TrainingDivergence(f"epoch {epoch_index}, step {step}: {exc}") from exc
        with np.errstate(over="ignore", invalid="ignore"):
            sgd_momentum_step(named, grads, state, config.lr, config.momentum)
        if not all(np.all(np.isfinite(p.data)) for p in named.values()):
            raise TrainingDivergence(f"epoch {epoch_index}, step {step}: non-finite parameters after update")

        r_sum += res.r_hat
        obj_sum += res.objective
        for pair, e in res.e_hat.items():
            e_sum[pair] = e_sum.get(pair, 0.0) + e
        for pair, g in res.gp.items():
            gp_sum[pair] = gp_sum.get(pair, 0.0) + g
        for pair, (c, n) in res.correct.items():
            acc = hits.setdefault(pair, [0, 0])
            acc[0] += c
            acc[1] += n
        train_hits += np.asarray(res.train_hits)

    e_mean = {p: v / n_steps for p, v in e_sum.items()}
    acc = {p: c / n for p, (c, n) in hits.items()}
    if config.metric == "hdiv":
        d_hat = L.distance_matrix("hdiv", acc, T)
    elif config.metric == "w1":
        d_hat = L.distance_matrix("w1", e_mean, T)
    else:
        d_hat = np.zeros((T, T))
    return EpochStats(
        epoch=epoch_index,
        objective=obj_sum / n_steps,
        r_hat=r_sum / n_steps,
        e_hat=e_mean,
        gp={p: v / n_steps for p, v in gp_sum.items()},
        disc_accuracy=acc,
        d_hat=d_hat,
        train_accuracy=[float(h / n) for h, n in train_hits],
        steps=n_steps,
    )


# ---------------------------------------------------------------------------
# evaluation

def predict(params: AmtnnParams, task: int, x) -> np.ndarray:
    feats = extract_features(tn.Tensor(np.asarray(x, dtype=np.float64)), params.theta_f)
    return np.argmax(head_logits(feats, params.theta_h[task]).data, axis=1)


def evaluate(params: AmtnnParams, datasets: Sequence[TaskDataset], split="test") -> Dict[str, object]:
    """Per-task accuracy of head ``t`` on task ``t`` and the macro average."""
    per_task = []
    for t, d in enumerate(datasets):
        part = getattr(d, split)
        if len(part) == 0:
            raise ValueError(f"{d.name}: empty {split} set")
        per_task.append(float(np.mean(predict(params, t, part.x) == part.y)))
    return {"per_task": per_task, "mean": float(np.mean(per_task))}


def export_features(params: AmtnnParams, datasets: Sequence[TaskDataset], split="test"):
    """Rows ``(task, label, f_0, ..., f_k)`` of extracted features, for external embedding plots."""
    rows = []
    for t, d in enumerate(datasets):
        part = getattr(d, split)
        if len(part) == 0:
            continue
        feats = extract_features(tn.Tensor(part.x), params.theta_f).data
        rows.append(np.column_stack([np.full(len(part), t), part.y, feats]))
    return np.vstack(rows) if rows else np.zeros((0, 2))


# ---------------------------------------------------------------------------
# full run

def _pair_label(pair):
    return f"{pair[0]}-{pair[1]}"


@dataclass
class RunReport:
    config: TrainConfig
    method: Optional[str]
    num_tasks: int
    task_names: List[str]
    sample_counts: List[int]
    epochs: List[dict]
    final_alpha: np.ndarray
    final_test: Dict[str, object]
    params: AmtnnParams = field(repr=False, default=None)

    def to_dict(self) -> dict:
        cfg = asdict(self.config)
        return {
            "schema": 1,
            "method": self.method,
            "seed": self.config.seed,
            "config": cfg,
            "num_tasks": self.num_tasks,
            "tasks": self.task_names,
            "sample_counts": self.sample_counts,
            "epochs": self.epochs,
            "final_alpha": self.final_alpha.tolist(),
            "final_test_accuracy": self.final_test,
        }


def _epoch_record(stats: EpochStats, alpha_used, alpha_next, test_eval, metric) -> dict:
    rec = {
        "epoch": stats.epoch,
        "objective": stats.objective,
        "r_hat": stats.r_hat.tolist(),
        "alpha": np.asarray(alpha_used).tolist(),
        "alpha_next": np.asarray(alpha_next).tolist(),
        "train_accuracy": stats.train_accuracy,
        "test_accuracy": test_eval["per_task"],
        "test_accuracy_mean": test_eval["mean"],
    }
    if metric != "none":
        rec["e_hat"] = {_pair_label(p): v for p, v in sorted(stats.e_hat.items())}
        rec["d_hat"] = stats.d_hat.tolist()
        if metric == "hdiv":
            rec["disc_accuracy"] = {_pair_label(p): v for p, v in sorted(stats.disc_accuracy.items())}
        if stats.gp:
            rec["gradient_penalty"] = {_pair_label(p): v for p, v in sorted(stats.gp.items())}
    return rec


def prepare_datasets(config: TrainConfig, datasets: Sequence[TaskDataset]) -> List[TaskDataset]:
    """Equalise training sizes to ``min_t m_t`` when relation solving is on."""
    datasets = list(datasets)
    check_tasks(datasets)
    if config.alpha_mode == "solved" and config.equalize_sizes:
        m = min(d.m for d in datasets)
        datasets = [d if d.m == m else subsample(d, m, [config.seed, t])
                    for t, d in enumerate(datasets)]
    return datasets


def _checked_evaluate(params, datasets, epoch):
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            return evaluate(params, datasets)
    except tn.NonFiniteError as exc:
        raise TrainingDivergence(f"epoch {epoch}, evaluation: {exc}") from exc


def run_training(config: TrainConfig, datasets: Sequence[TaskDataset],
                 arch: Optional[Architecture] = None, method: Optional[str] = None,
                 callback=None) -> RunReport:
    """Full alternating optimisation; the relation matrix starts uniform (or identity)."""
    datasets = prepare_datasets(config, datasets)
    T = len(datasets)
    if config.metric != "none" and T < 2:
        raise ValueError("adversarial metrics need at least two tasks")
    num_classes = max(d.num_classes for d in datasets)
    arch = arch or Architecture.mlp(datasets[0].dim, num_classes)
    if arch.input_dim != datasets[0].dim or arch.num_classes < num_classes:
        raise ValueError("architecture does not match the data")
    params = init_params(arch, T, config.seed)
    state = OptimizerState()
    alpha = initial_alpha(config.alpha_mode, T)
    records = []
    for epoch in range(config.epochs):
        stats = train_epoch(params, datasets, alpha, config, epoch, state)
        alpha_used = alpha
        if config.alpha_mode == "solved":
            problem = AlphaProblem(stats.r_hat, stats.d_hat, config.kappa1, config.kappa2)
            alpha = solve_alpha(problem, config.solver_tol, config.solver_max_iter).alpha
        test_eval = _checked_evaluate(params, datasets, epoch)
        records.append(_epoch_record(stats, alpha_used, alpha, test_eval, config.metric))
        if callback is not None:
            callback(stats, alpha)
    return RunReport(
        config=config, method=method, num_tasks=T, task_names=[d.name for d in datasets],
        sample_counts=[d.m for d in datasets], epochs=records, final_alpha=np.asarray(alpha),
        final_test=_checked_evaluate(params, datasets, config.epochs - 1), params=params,
    )


def estimate_distances(datasets: Sequence[TaskDataset], metric: str, epochs=20, seed=0,
                       hidden=(64,), **overrides) -> np.ndarray:
    """Train only pairwise discriminators on the raw inputs and return the distance matrix.

    The extractor has no layers, so the discriminators see fixed inputs and
    nothing is aligned.
    """
    num_classes = max(d.num_classes for d in datasets)
    arch = Architecture.mlp(datasets[0].dim, num_classes, extractor=(), head=(), discriminator=hidden)
    config = TrainConfig(metric=metric, alpha_mode="uniform-fixed", epochs=epochs, seed=seed, **overrides)
    report = run_training(config, datasets, arch)
    return np.asarray(report.epochs[-1]["d_hat"])


# ---------------------------------------------------------------------------
# gradient check

def toy_problem(num_tasks=2, dim=8, num_classes=3, n=6, seed=0):
    """Small random batches and a narrow network for finite-difference checks."""
    rng = np.random.default_rng([seed, 99])
    batches = [(rng.normal(size=(n, dim)), rng.integers(0, num_classes, size=n)) for _ in range(num_tasks)]
    arch = Architecture.mlp(dim, num_classes, extractor=(6,), head=(5,), discriminator=(4,))
    params = init_params(arch, num_tasks, seed)
    alpha = rng.dirichlet(np.ones(num_tasks), size=num_tasks)
    return params, batches, alpha


def gradient_check(metric: str, seed=0, h=1e-5, rho=0.5, gp_weight=1.0, w1_sigmoid=False) -> float:
    """Max relative error between analytic and central-difference gradients of the full objective.

    The objective is evaluated without gradient reversal so that the
    analytic gradient is the true gradient of the reported value.
    """
    params, batches, alpha = toy_problem(seed=seed)
    config = TrainConfig(metric=metric, alpha_mode="uniform-fixed", gp_weight=gp_weight,
                         w1_sigmoid_output=w1_sigmoid)
    named = params.named()

    def objective_tensor():
        feats = [extract_features(x, params.theta_f) for x, _ in batches]
        r = L.task_loss_matrix(batches, params, feats)
        e_hat, gp = {}, {}
        if metric != "none":
            for pair in params.pairs():
                t, i = pair
                if metric == "hdiv":
                    e_hat[pair] = L.adversarial_loss_h(feats[t], feats[i], params, pair)
                else:
                    e_hat[pair] = L.adversarial_loss_w1(feats[t], feats[i], params, pair, w1_sigmoid=w1_sigmoid)
                    gp[pair] = L.gradient_penalty(feats[t], feats[i], params, pair, seed=[seed, t, i],
                                                  w1_sigmoid=w1_sigmoid)
        return L.total_objective(r, alpha, e_hat, rho, gp or None, config.gp_weight,
                                 metric="w1" if metric == "w1" else "hdiv")

    analytic = tn.backward(objective_tensor(), named)
    saved = params.arrays()

    def value(arrays):
        params.load_arrays(arrays)
        # graph recording stays on: the penalty differentiates the critic internally
        return objective_tensor().item()

    try:
        numeric = tn.finite_difference_gradient(value, saved, h)
    finally:
        params.load_arrays(saved)
    return tn.max_relative_error(analytic, numeric)
