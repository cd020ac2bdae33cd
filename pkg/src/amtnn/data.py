"""Task datasets: synthetic covariate-shift generators and file loaders.

File formats
------------
IDX (big-endian): images start with magic ``0x00000803``, a u32 count and
u32 row/column sizes, followed by u8 pixels; labels start with magic
``0x00000801`` and a u32 count, followed by u8 labels.

Sparse bag-of-words text: one example per line, ``label idx:val idx:val ...``
with 0-based feature indices below the declared dimension.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataFormatError(ValueError):
    """Malformed input file; the message names the position."""


@dataclass
class Split:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2 or self.y.shape != (self.x.shape[0],):
            raise ValueError(f"features {self.x.shape} and labels {self.y.shape} do not line up")

    def __len__(self):
        return self.x.shape[0]


@dataclass
class TaskDataset:
    name: str
    train: Split
    test: Split
    num_classes: int

    def __post_init__(self):
        for part in (self.train, self.test):
            if len(part) and (part.y.min() < 0 or part.y.max() >= self.num_classes):
                raise ValueError(f"{self.name}: labels must lie in [0, {self.num_classes})")
        if self.train.x.shape[1] != self.test.x.shape[1]:
            raise ValueError(f"{self.name}: train and test widths differ")

    @property
    def dim(self):
        return self.train.x.shape[1]

    @property
    def m(self):
        return len(self.train)


def check_tasks(tasks: Sequence[TaskDataset]):
    if not tasks:
        raise ValueError("no tasks")
    widths = {t.dim for t in tasks}
    if len(widths) != 1:
        raise ValueError(f"tasks disagree on feature width: {sorted(widths)}")


# ---------------------------------------------------------------------------
# synthetic tasks

@dataclass
class SyntheticSpec:
    """Gaussian class clusters shared by all tasks, moved per task by a mean shift.

    Class centers live in the first ``dim - 1`` coordinates; ``shifts[t]`` is
    measured in units of ``noise`` along the last coordinate, which carries
    no label information.
    """
    num_tasks: int = 3
    samples: int = 200
    test_samples: int = 1000
    num_classes: int = 4
    dim: int = 16
    shifts: Tuple[float, ...] = (0.0, 0.0, 5.0)
    class_separation: float = 2.0
    noise: float = 1.0
    seed: int = 0
    task_seeds: Optional[Tuple[int, ...]] = None

    def validate(self):
        if self.noise <= 0:
            raise ValueError("noise must be positive")
        if self.dim < 2:
            raise ValueError("dim must be at least 2")
        if self.num_tasks < 1 or self.samples < 1 or self.test_samples < 0 or self.num_classes < 2:
            raise ValueError("need >=1 task, >=1 sample and >=2 classes")
        if len(self.shifts) != self.num_tasks:
            raise ValueError(f"{len(self.shifts)} shifts for {self.num_tasks} tasks")


def class_centers(spec: SyntheticSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 0])
    centers = np.zeros((spec.num_classes, spec.dim))
    raw = rng.normal(size=(spec.num_classes, spec.dim - 1))
    raw /= np.linalg.norm(raw, axis=1, keepdims=True)
    centers[:, :-1] = spec.class_separation * raw
    return centers


def shift_vectors(spec: SyntheticSpec) -> np.ndarray:
    shifts = np.zeros((spec.num_tasks, spec.dim))
    shifts[:, -1] = np.asarray(spec.shifts, dtype=np.float64) * spec.noise
    return shifts


def _sample(rng, centers, shift, noise, n):
    labels = rng.integers(0, centers.shape[0], size=n)
    x = centers[labels] + shift + noise * rng.normal(size=(n, centers.shape[1]))
    return Split(x, labels)


def gen_synthetic_tasks(spec: SyntheticSpec) -> List[TaskDataset]:
    """Tasks whose class ``c`` is drawn from N(center_c + shift_t, noise^2 I)."""
    spec.validate()
    centers = class_centers(spec)
    shifts = shift_vectors(spec)
    tasks = []
    for t in range(spec.num_tasks):
        sub_seed = spec.task_seeds[t] if spec.task_seeds else t + 1
        rng = np.random.default_rng([spec.seed, sub_seed])
        train = _sample(rng, centers, shifts[t], spec.noise, spec.samples)
        test = _sample(rng, centers, shifts[t], spec.noise, spec.test_samples)
        tasks.append(TaskDataset(f"task{t}", train, test, spec.num_classes))
    return tasks


# ---------------------------------------------------------------------------
# IDX

def _read_u32(buf, offset, path):
    if len(buf) < offset + 4:
        raise DataFormatError(f"{path}: truncated header at byte {offset}")
    return struct.unpack_from(">I", buf, offset)[0]


def read_idx_images(path):
    """``(n, rows * cols)`` float array with pixels scaled to [0, 1], plus ``(rows, cols)``."""
    with open(path, "rb") as f:
        buf = f.read()
    magic = _read_u32(buf, 0, path)
    if magic != IDX_IMAGES_MAGIC:
        raise DataFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
    n, rows, cols = (_read_u32(buf, k, path) for k in (4, 8, 12))
    need = 16 + n * rows * cols
    if len(buf) < need:
        raise DataFormatError(f"{path}: truncated, {len(buf)} bytes but header implies {need}")
    pixels = np.frombuffer(buf, dtype=np.uint8, count=n * rows * cols, offset=16)
    return pixels.reshape(n, rows * cols).astype(np.float64) / 255.0, (rows, cols)


def read_idx_labels(path) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    magic = _read_u32(buf, 0, path)
    if magic != IDX_LABELS_MAGIC:
        raise DataFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
    n = _read_u32(buf, 4, path)
    if len(buf) < 8 + n:
        raise DataFormatError(f"{path}: truncated, {len(buf)} bytes but header implies {8 + n}")
    return np.frombuffer(buf, dtype=np.uint8, count=n, offset=8).astype(np.int64)


def load_idx(images_path, labels_path, downscale=False) -> Split:
    """Flattened images and labels from an IDX pair."""
    x, (rows, cols) = read_idx_images(images_path)
    y = read_idx_labels(labels_path)
    if x.shape[0] != y.shape[0]:
        raise DataFormatError(f"{images_path} has {x.shape[0]} images but {labels_path} has {y.shape[0]} labels")
    if downscale:
        x = downscale_2x2(x, rows, cols)
    return Split(x, y)


def downscale_2x2(x: np.ndarray, rows=28, cols=28) -> np.ndarray:
    """Mean-pool flattened images over 2x2 blocks (28x28 -> 14x14)."""
    n = x.shape[0]
    img = x.reshape(n, rows // 2, 2, cols // 2, 2)
    return img.mean(axis=(2, 4)).reshape(n, (rows // 2) * (cols // 2))


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray):
    """Write u8 images ``(n, rows, cols)`` and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.size))
        f.write(labels.tobytes())


# ---------------------------------------------------------------------------
# sparse bag of words

def load_sparse_bow(path, dim: int) -> Split:
    """Dense rows from ``label idx:val ...`` lines; blank lines are skipped."""
    rows, labels = [], []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            try:
                label = int(parts[0])
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: bad label {parts[0]!r}") from None
            row = {}
            for tok in parts[1:]:
                idx, sep, val = tok.partition(":")
                try:
                    if not sep:
                        raise ValueError
                    k, v = int(idx), float(val)
                except ValueError:
                    raise DataFormatError(f"{path}:{lineno}: bad feature {tok!r}") from None
                if not 0 <= k < dim:
                    raise DataFormatError(f"{path}:{lineno}: index {k} outside [0, {dim})")
                row[k] = v
            rows.append(row)
            labels.append(label)
    x = np.zeros((len(rows), dim))
    for r, row in enumerate(rows):
        for k, v in row.items():
            x[r, k] = v
    return Split(x, np.asarray(labels, dtype=np.int64))


# ---------------------------------------------------------------------------
# sampling

def subsample(dataset: TaskDataset, n: int, seed) -> TaskDataset:
    """Seeded sample of ``n`` training rows without replacement; test split untouched."""
    if n > dataset.m:
        raise ValueError(f"{dataset.name}: cannot draw {n} of {dataset.m} training rows")
    idx = np.random.default_rng(seed).permutation(dataset.m)[:n]
    return replace(dataset, train=Split(dataset.train.x[idx], dataset.train.y[idx]))


def _entropy(seed, *extra):
    return [int(s) for s in np.atleast_1d(seed)] + [int(e) for e in extra]


def minibatches(split: Split, batch_size: int, seed, epoch: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    """One epoch of shuffled batches; the last short batch is kept.

    ``seed`` may be an int or a sequence of ints.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    order = np.random.default_rng(_entropy(seed, epoch)).permutation(len(split))
    return [(split.x[order[k:k + batch_size]], split.y[order[k:k + batch_size]])
            for k in range(0, len(split), batch_size)]


def cycling_batches(split: Split, batch_size: int, seed, epoch: int) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Endless batch stream for one training epoch; reshuffles at every wrap.

    Used to align a short task with the longest one.
    """
    wrap = 0
    while True:
        yield from minibatches(split, batch_size, _entropy(seed, epoch), wrap)
        wrap += 1
