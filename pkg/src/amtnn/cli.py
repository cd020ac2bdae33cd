"""Batch entry point: ``amtnn {train,eval,bounds,alpha-solve,gradcheck}``.

Configuration is a flat TOML file; every key is optional and listed in
``SCHEMA`` with its default. Unknown keys are errors. Relative paths are
resolved against the directory of the config file.

Exit codes: 0 success, 1 configuration error, 2 numerical divergence (or a
failed gradient check), 3 input/output or data-format error.
"""
from __future__ import annotations

import argparse
import csv
import datetime
import json
import os
import platform
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import BACKEND, __version__
from .alpha_solver import AlphaProblem, solve_alpha
from .bounds import bound_decomposition, bound_inputs_from_report
from .data import DataFormatError, SyntheticSpec, TaskDataset, gen_synthetic_tasks, load_idx, load_sparse_bow, subsample
from .model import Architecture, init_params
from .trainer import (PRESETS, TrainConfig, TrainingDivergence, evaluate, export_features,
                      gradient_check, run_training)

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3
GRADCHECK_TOLERANCE = 1e-4


class ConfigError(ValueError):
    pass


_NUM = (int, float)

# key -> (accepted types, default, description)
SCHEMA: Dict[str, tuple] = {
    "method": (str, "amtnn_w", "one of " + ", ".join(PRESETS)),
    "seed": (int, 0, "training seed; also the synthetic data seed unless data_seed is set"),
    "out": (str, "runs/out", "output directory"),
    # training
    "epochs": (int, 30, "training epochs"),
    "batch_size": (int, 32, "minibatch size per task"),
    "lr": (_NUM, 0.01, "SGD learning rate"),
    "momentum": (_NUM, 0.9, "SGD momentum"),
    "rho": (_NUM, None, "adversarial trade-off; default 1/T"),
    "kappa1": (_NUM, 1.0, "relation solver: L2 regularization weight"),
    "kappa2": (_NUM, 1.0, "relation solver: distance weight (mtl_weighted forces 0)"),
    "kappa2_grid": (list, None, "train once per listed kappa2, each in its own subdirectory"),
    "gp_weight": (_NUM, 1.0, "gradient penalty weight (w1 only)"),
    "critic_steps": (int, 1, "discriminator updates per minibatch"),
    "w1_sigmoid_output": (bool, False, "squash the w1 critic output through a sigmoid"),
    "equalize_sizes": (bool, True, "subsample tasks to the smallest size when solving relations"),
    "solver_tol": (_NUM, 1e-10, "relation solver stopping tolerance"),
    "solver_max_iter": (int, 10000, "relation solver iteration cap"),
    # architecture
    "extractor_widths": (list, [256, 128], "hidden widths of the shared extractor"),
    "head_widths": (list, [64], "hidden widths of each task head"),
    "discriminator_widths": (list, [64], "hidden widths of each pair discriminator"),
    "activation": (str, "elu", "hidden activation: elu or relu"),
    # data
    "data": (str, "synthetic", "synthetic, idx or bow"),
    "data_seed": (int, None, "synthetic data seed; default follows seed"),
    "num_tasks": (int, 3, "synthetic: number of tasks"),
    "samples": (int, 200, "synthetic: training samples per task"),
    "test_samples": (int, 1000, "synthetic: test samples per task"),
    "num_classes": (int, 4, "number of classes (synthetic, bow; idx uses 10 when unset)"),
    "dim": (int, 16, "synthetic: input dimension"),
    "shifts": (list, [0.0, 0.0, 5.0], "synthetic: per-task shift along the label-free axis, in noise units"),
    "class_separation": (_NUM, 2.0, "synthetic: distance of class centers from the origin"),
    "noise": (_NUM, 1.0, "synthetic: isotropic noise scale"),
    "task_names": (list, None, "idx/bow: task names"),
    "train_images": (list, None, "idx: training image files, one per task"),
    "train_labels": (list, None, "idx: training label files, one per task"),
    "test_images": (list, None, "idx: test image files, one per task"),
    "test_labels": (list, None, "idx: test label files, one per task"),
    "downscale": (bool, False, "idx: 2x2 mean-pool the images"),
    "train_limit": (int, None, "idx/bow: seeded subsample of each training set"),
    "train_files": (list, None, "bow: training files, one per task"),
    "test_files": (list, None, "bow: test files, one per task"),
    "bow_dim": (int, None, "bow: feature dimension"),
    # bounds
    "vc_dim": (_NUM, 10.0, "bounds: user-supplied capacity d"),
    "delta": (_NUM, 0.05, "bounds: confidence parameter"),
    "lipschitz_K": (_NUM, 1.0, "bounds: Lipschitz constant K for the w1 form"),
}


def _check_type(key, value, types):
    if isinstance(value, bool) and types is not bool:
        raise ConfigError(f"{key}: expected {types}, got a boolean")
    if not isinstance(value, types):
        raise ConfigError(f"{key}: expected {types}, got {type(value).__name__}")


def parse_config(text: str, base_dir: Path = Path(".")) -> Dict[str, Any]:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from None
    cfg = {k: (list(v[1]) if isinstance(v[1], list) else v[1]) for k, v in SCHEMA.items()}
    for key, value in raw.items():
        if key not in SCHEMA:
            if isinstance(value, dict):
                raise ConfigError(f"{key}: tables are not supported; the config is flat")
            raise ConfigError(f"{key}: unknown config key")
        _check_type(key, value, SCHEMA[key][0])
        cfg[key] = value
    cfg["_base_dir"] = base_dir
    cfg["_explicit"] = set(raw)
    return cfg


def load_config(path: Optional[str]) -> Dict[str, Any]:
    if path is None:
        return parse_config("")
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text, p.parent)


def _widths(cfg, key):
    widths = cfg[key]
    if not all(isinstance(w, int) and not isinstance(w, bool) and w > 0 for w in widths):
        raise ConfigError(f"{key}: widths must be positive integers")
    return tuple(widths)


def train_config(cfg, kappa2=None) -> TrainConfig:
    method = cfg["method"]
    if method not in PRESETS:
        raise ConfigError(f"method: unknown method '{method}', expected one of {sorted(PRESETS)}")
    fields = {k: cfg[k] for k in ("epochs", "batch_size", "lr", "momentum", "rho", "kappa1", "kappa2",
                                  "gp_weight", "critic_steps", "w1_sigmoid_output", "equalize_sizes",
                                  "solver_tol", "solver_max_iter", "seed")}
    if kappa2 is not None:
        fields["kappa2"] = kappa2
    for k in ("lr", "momentum", "kappa1", "kappa2", "gp_weight", "solver_tol"):
        fields[k] = float(fields[k])
    if fields["rho"] is not None:
        fields["rho"] = float(fields["rho"])
    try:
        return TrainConfig.preset(method, **fields)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def architecture(cfg, datasets: List[TaskDataset]) -> Architecture:
    if cfg["activation"] not in ("elu", "relu"):
        raise ConfigError("activation: expected 'elu' or 'relu'")
    num_classes = max(d.num_classes for d in datasets)
    return Architecture.mlp(datasets[0].dim, num_classes, _widths(cfg, "extractor_widths"),
                            _widths(cfg, "head_widths"), _widths(cfg, "discriminator_widths"),
                            cfg["activation"])


def _paths(cfg, key, count=None):
    value = cfg[key]
    if value is None:
        raise ConfigError(f"{key}: required for data = '{cfg['data']}'")
    if not all(isinstance(v, str) for v in value):
        raise ConfigError(f"{key}: expected a list of paths")
    if count is not None and len(value) != count:
        raise ConfigError(f"{key}: expected {count} entries, got {len(value)}")
    return [cfg["_base_dir"] / v for v in value]


def load_datasets(cfg) -> List[TaskDataset]:
    try:
        return _load_datasets(cfg)
    except (ConfigError, DataFormatError):
        raise
    except ValueError as exc:
        # file contents that do not form valid tasks (labels out of range, widths differ, ...)
        raise DataFormatError(str(exc)) from None


def _load_datasets(cfg) -> List[TaskDataset]:
    kind = cfg["data"]
    if kind == "synthetic":
        seed = cfg["data_seed"] if cfg["data_seed"] is not None else cfg["seed"]
        spec = SyntheticSpec(num_tasks=cfg["num_tasks"], samples=cfg["samples"],
                             test_samples=cfg["test_samples"], num_classes=cfg["num_classes"],
                             dim=cfg["dim"], shifts=tuple(float(s) for s in cfg["shifts"]),
                             class_separation=float(cfg["class_separation"]),
                             noise=float(cfg["noise"]), seed=seed)
        try:
            return gen_synthetic_tasks(spec)
        except ValueError as exc:
            raise ConfigError(f"synthetic data: {exc}") from None
    if kind == "idx":
        train_x = _paths(cfg, "train_images")
        T = len(train_x)
        train_y, test_x, test_y = (_paths(cfg, k, T) for k in ("train_labels", "test_images", "test_labels"))
        num_classes = cfg["num_classes"] if "num_classes" in cfg["_explicit"] else 10
        tasks = [TaskDataset(name, load_idx(train_x[t], train_y[t], cfg["downscale"]),
                             load_idx(test_x[t], test_y[t], cfg["downscale"]), num_classes)
                 for t, name in enumerate(_task_names(cfg, T))]
    elif kind == "bow":
        train_f = _paths(cfg, "train_files")
        T = len(train_f)
        test_f = _paths(cfg, "test_files", T)
        if cfg["bow_dim"] is None:
            raise ConfigError("bow_dim: required for data = 'bow'")
        num_classes = cfg["num_classes"] if "num_classes" in cfg["_explicit"] else 2
        tasks = [TaskDataset(name, load_sparse_bow(train_f[t], cfg["bow_dim"]),
                             load_sparse_bow(test_f[t], cfg["bow_dim"]), num_classes)
                 for t, name in enumerate(_task_names(cfg, T))]
    else:
        raise ConfigError(f"data: expected synthetic, idx or bow, got '{kind}'")
    if cfg["train_limit"] is not None:
        tasks = [subsample(d, min(cfg["train_limit"], d.m), [cfg["seed"], 7, t]) for t, d in enumerate(tasks)]
    return tasks


def _task_names(cfg, T):
    names = cfg["task_names"] or [f"task{t}" for t in range(T)]
    if len(names) != T:
        raise ConfigError(f"task_names: expected {T} entries, got {len(names)}")
    return [str(n) for n in names]


# ---------------------------------------------------------------------------
# artifacts

def dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_matrix_csv(path: Path, matrix, names):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["task", *names])
        for name, row in zip(names, np.asarray(matrix)):
            w.writerow([name, *(repr(float(v)) for v in row)])


def write_features_csv(path: Path, rows: np.ndarray):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["task", "label", *(f"f{k}" for k in range(rows.shape[1] - 2))])
        for row in rows:
            w.writerow([int(row[0]), int(row[1]), *(repr(float(v)) for v in row[2:])])


def _meta(command, cfg):
    return {
        "command": command,
        "created": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "version": __version__,
        "kernel_backend": BACKEND,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "seed": cfg["seed"],
    }


def _bounds_section(report: dict, cfg) -> dict:
    total = sum(report["sample_counts"])
    if total <= cfg["vc_dim"]:
        return {"unavailable": f"total sample count {total} does not exceed vc_dim {cfg['vc_dim']}"}
    try:
        inputs = bound_inputs_from_report(report, float(cfg["vc_dim"]), float(cfg["delta"]),
                                          float(cfg["lipschitz_K"]))
    except ValueError as exc:
        raise ConfigError(f"bounds: {exc}") from None
    return bound_decomposition(inputs).to_dict()


def run_train(cfg, out: Path) -> List[dict]:
    datasets = load_datasets(cfg)
    arch = architecture(cfg, datasets)
    grid = cfg["kappa2_grid"]
    if grid is not None and not all(isinstance(k, _NUM) and not isinstance(k, bool) for k in grid):
        raise ConfigError("kappa2_grid: expected a list of numbers")
    targets = [(None, out)] if grid is None else [(float(k), out / f"kappa2={float(k):g}") for k in grid]
    reports = []
    for kappa2, target in targets:
        config = train_config(cfg, kappa2)
        report = run_training(config, datasets, arch, method=cfg["method"])
        target.mkdir(parents=True, exist_ok=True)
        payload = report.to_dict()
        payload["architecture"] = {"extractor": list(_widths(cfg, "extractor_widths")),
                                   "head": list(_widths(cfg, "head_widths")),
                                   "discriminator": list(_widths(cfg, "discriminator_widths")),
                                   "activation": cfg["activation"]}
        payload["bounds"] = _bounds_section(payload, cfg)
        (target / "report.json").write_text(dump_json(payload))
        write_matrix_csv(target / "alpha.csv", report.final_alpha, report.task_names)
        write_features_csv(target / "features.csv", export_features(report.params, datasets))
        np.savez(target / "params.npz", **report.params.arrays())
        (target / "meta.json").write_text(dump_json(_meta("train", cfg)))
        reports.append(payload)
        print(f"{target}: mean test accuracy {report.final_test['mean']:.4f}")
    return reports


def run_eval(cfg, params_path: Path, out: Path) -> dict:
    datasets = load_datasets(cfg)
    arch = architecture(cfg, datasets)
    params = init_params(arch, len(datasets), cfg["seed"])
    with np.load(params_path) as f:
        arrays = dict(f)
    try:
        params.load_arrays(arrays)
    except (KeyError, ValueError) as exc:
        raise DataFormatError(f"{params_path}: parameters do not match the configured network: {exc}") from None
    result = evaluate(params, datasets)
    result["tasks"] = [d.name for d in datasets]
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.json").write_text(dump_json({"schema": 1, **result}))
    print(dump_json(result), end="")
    return result


def run_bounds(cfg, report_path: Path, out: Path) -> dict:
    try:
        report = json.loads(report_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{report_path}: not valid JSON: {exc}") from None
    if report.get("schema") != 1 or "epochs" not in report:
        raise DataFormatError(f"{report_path}: not a schema-1 training report")
    result = {"schema": 1, **_bounds_section(report, cfg)}
    out.mkdir(parents=True, exist_ok=True)
    (out / "bounds.json").write_text(dump_json(result))
    print(dump_json(result), end="")
    return result


def run_alpha_solve(cfg, problem_path: Path, out: Path) -> dict:
    """Problem file: JSON with ``r_hat`` and ``d_hat`` (T x T) and optional ``kappa1``, ``kappa2``."""
    try:
        spec = json.loads(problem_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{problem_path}: not valid JSON: {exc}") from None
    if not isinstance(spec, dict) or "r_hat" not in spec or "d_hat" not in spec:
        raise DataFormatError(f"{problem_path}: expected an object with r_hat and d_hat")
    try:
        problem = AlphaProblem(spec["r_hat"], spec["d_hat"], float(spec.get("kappa1", cfg["kappa1"])),
                               float(spec.get("kappa2", cfg["kappa2"])))
    except (ValueError, TypeError) as exc:
        raise DataFormatError(f"{problem_path}: {exc}") from None
    sol = solve_alpha(problem, float(cfg["solver_tol"]), cfg["solver_max_iter"])
    result = {"schema": 1, "alpha": sol.alpha.tolist(), "objective": sol.objective,
              "iterations": sol.iterations, "converged": sol.converged}
    out.mkdir(parents=True, exist_ok=True)
    (out / "alpha_solution.json").write_text(dump_json(result))
    write_matrix_csv(out / "alpha.csv", sol.alpha, [f"task{t}" for t in range(problem.num_tasks)])
    print(dump_json(result), end="")
    return result


def run_gradcheck(seed: int) -> float:
    worst = 0.0
    for metric in ("none", "hdiv", "w1"):
        err = gradient_check(metric, seed=seed)
        print(f"{metric}: max relative error {err:.3e}")
        worst = max(worst, err)
    print(f"max relative error {worst:.3e}")
    return worst


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="amtnn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("train", "train a method and write its report"),
                            ("eval", "evaluate saved parameters on the configured test sets"),
                            ("bounds", "evaluate bound terms for a training report"),
                            ("alpha-solve", "solve a standalone relation problem"),
                            ("gradcheck", "finite-difference check of the full objective")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat TOML config file")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", help="output directory (overrides the config)")
        if name == "eval":
            p.add_argument("--params", help="parameter file; default OUT/params.npz")
        if name == "bounds":
            p.add_argument("--report", help="training report; default OUT/report.json")
        if name == "alpha-solve":
            p.add_argument("--problem", required=True, help="JSON file with r_hat and d_hat")
    sub.add_parser("config-keys", help="list every config key with its default")
    return parser


def _thread_cap():
    raw = os.environ.get("AMTNN_THREADS")
    if raw is None:
        return None
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise ConfigError(f"AMTNN_THREADS: expected a positive integer, got {raw!r}")
    return n


def _dispatch(args) -> int:
    if args.command == "config-keys":
        for key, (_, default, doc) in SCHEMA.items():
            print(f"{key} = {default!r}  # {doc}")
        return EXIT_OK
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    out = Path(args.out) if args.out else cfg["_base_dir"] / cfg["out"]
    if args.command == "train":
        run_train(cfg, out)
    elif args.command == "eval":
        run_eval(cfg, Path(args.params) if args.params else out / "params.npz", out)
    elif args.command == "bounds":
        run_bounds(cfg, Path(args.report) if args.report else out / "report.json", out)
    elif args.command == "alpha-solve":
        run_alpha_solve(cfg, Path(args.problem), out)
    elif args.command == "gradcheck":
        if run_gradcheck(cfg["seed"]) >= GRADCHECK_TOLERANCE:
            print(f"gradient check failed: tolerance {GRADCHECK_TOLERANCE:g}", file=sys.stderr)
            return EXIT_DIVERGED
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cap = _thread_cap()
        if cap is None:
            return _dispatch(args)
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=cap):
            return _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergence as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, DataFormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
