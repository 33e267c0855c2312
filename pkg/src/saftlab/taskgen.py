"""Synthetic multi-task classification suites and CSV datasets.

Each task draws from the same C Gaussian clusters, rotated by a per-task angle
in the (x0, x1) plane, with a per-task assignment of classes to clusters.
All randomness comes from generators seeded by (seed, purpose, task index).
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .nn import TaskDataset

# Sub-seed purpose tags.
_MEANS, _PERM, _TRAIN, _TEST, _PRETRAIN, _SPLIT = range(6)


@dataclass(frozen=True)
class SuiteConfig:
    num_tasks: int = 4
    input_dim: int = 16
    num_classes: int = 4
    train_per_task: int = 512
    test_per_task: int = 256
    pretrain_size: int = 2048
    separation: float = 3.0
    noise: float = 1.0
    rotations_deg: tuple[float, ...] | None = None
    permute_classes: bool = True
    val_ratio: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.num_tasks < 1 or self.input_dim < 2 or self.num_classes < 2:
            raise ValueError("need num_tasks >= 1, input_dim >= 2, num_classes >= 2")
        if min(self.train_per_task, self.test_per_task, self.pretrain_size) < 2:
            raise ValueError("every split needs at least two samples")
        if self.separation <= 0 or self.noise < 0:
            raise ValueError("separation must be positive and noise nonnegative")
        if self.rotations_deg is not None:
            object.__setattr__(self, "rotations_deg", tuple(float(r) for r in self.rotations_deg))
            if len(self.rotations_deg) != self.num_tasks:
                raise ValueError("one rotation angle per task required")
        if not 0 < self.val_ratio < 1:
            raise ValueError("val_ratio must lie in (0, 1)")

    @property
    def angles(self) -> tuple[float, ...]:
        if self.rotations_deg is not None:
            return self.rotations_deg
        return tuple(25.0 * t for t in range(self.num_tasks))


@dataclass
class TaskSplits:
    train: TaskDataset
    val: TaskDataset
    test: TaskDataset


@dataclass
class TaskSuite:
    pretrain: TaskDataset
    tasks: list[TaskSplits]
    config: SuiteConfig = field(default_factory=SuiteConfig)

    @property
    def task_ids(self) -> list[str]:
        return [t.train.task_id for t in self.tasks]


def _rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng([seed, *tags])


def _rotation(d: int, degrees: float) -> np.ndarray:
    R = np.eye(d)
    a = math.radians(degrees)
    R[0, 0] = R[1, 1] = math.cos(a)
    R[0, 1], R[1, 0] = -math.sin(a), math.sin(a)
    return R


def _balanced_labels(n: int, c: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % c)


def _sample(means: np.ndarray, labels: np.ndarray, noise: float, rng: np.random.Generator) -> np.ndarray:
    return means[labels] + noise * rng.standard_normal((labels.size, means.shape[1]))


def cluster_means(config: SuiteConfig) -> np.ndarray:
    """C x d cluster centres with norm ``separation``, shared by all tasks."""
    m = _rng(config.seed, _MEANS).standard_normal((config.num_classes, config.input_dim))
    return config.separation * m / np.linalg.norm(m, axis=1, keepdims=True)


def _plain_layout(config: SuiteConfig, t: int) -> np.ndarray:
    return cluster_means(config) @ _rotation(config.input_dim, config.angles[t]).T


def task_layout(config: SuiteConfig, t: int) -> np.ndarray:
    """Row c is the mean of class c for task t."""
    means = _plain_layout(config, t)
    if config.permute_classes and t > 0:
        perm = _rng(config.seed, _PERM, t).permutation(config.num_classes)
        means = means[perm]
    return means


def split(dataset: TaskDataset, val_ratio: float, seed: int) -> tuple[TaskDataset, TaskDataset]:
    """Seeded shuffle, then the first floor(val_ratio * N) rows become validation."""
    if not 0 < val_ratio < 1:
        raise ValueError("val_ratio must lie in (0, 1)")
    n = len(dataset)
    if n < 2:
        raise ValueError("need at least two rows to split")
    perm = np.random.default_rng([seed, _SPLIT]).permutation(n)
    n_val = math.floor(val_ratio * n)
    val, train = dataset.subset(perm[:n_val]), dataset.subset(perm[n_val:])
    val.split, train.split = "val", "train"
    return train, val


def generate_suite(config: SuiteConfig) -> TaskSuite:
    c, s = config.num_classes, config.seed
    tasks = []
    layouts = [task_layout(config, t) for t in range(config.num_tasks)]
    for t, means in enumerate(layouts):
        tid = f"task{t}"
        r = _rng(s, _TRAIN, t)
        n = config.train_per_task
        n_val = math.floor(config.val_ratio * n)
        # Class counts of the first n_val rows and of the remainder each stay within one.
        head = np.arange(n_val) % c
        tail = np.concatenate([np.repeat(np.arange(c), n // c), np.arange(n % c)])
        for k in head:
            tail = np.delete(tail, np.flatnonzero(tail == k)[0])
        y = np.concatenate([r.permutation(head), r.permutation(tail)])
        x = _sample(means, y, config.noise, r)
        val = TaskDataset(x[:n_val], y[:n_val], "val", tid)
        train = TaskDataset(x[n_val:], y[n_val:], "train", tid)
        r = _rng(s, _TEST, t)
        y = _balanced_labels(config.test_per_task, c, r)
        test = TaskDataset(_sample(means, y, config.noise, r), y, "test", tid)
        tasks.append(TaskSplits(train, val, test))

    # Pretraining mixes every task's input distribution under the unpermuted labels.
    r = _rng(s, _PRETRAIN)
    # Row i draws class i % C from task (i // C) % T, so both counts stay within one.
    i = r.permutation(config.pretrain_size)
    y, which = i % c, (i // c) % config.num_tasks
    plain = [_plain_layout(config, t) for t in range(config.num_tasks)]
    centres = np.stack([plain[w][k] for w, k in zip(which, y)])
    x = centres + config.noise * r.standard_normal(centres.shape)
    pretrain = TaskDataset(x, y, "pretrain", "pretrain")
    return TaskSuite(pretrain, tasks, config)


def suite_config_dict(config: SuiteConfig) -> dict:
    d = asdict(config)
    d["rotations_deg"] = list(config.angles)
    return d


class CSVFormatError(ValueError):
    pass


def load_csv(path, num_classes: int, split: str = "train", task_id: str = "") -> TaskDataset:
    """Read ``f0,...,f{d-1},label`` rows; errors name the offending line."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CSVFormatError(f"{path}: empty file") from None
        d = len(header) - 1
        expected = [f"f{i}" for i in range(d)] + ["label"]
        if d < 1 or [h.strip() for h in header] != expected:
            raise CSVFormatError(f"{path}:1: header must be f0,...,f{{d-1}},label")
        feats, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + 1:
                raise CSVFormatError(f"{path}:{lineno}: expected {d + 1} fields, got {len(row)}")
            try:
                vals = [float(v) for v in row[:-1]]
                label = int(row[-1])
            except ValueError as exc:
                raise CSVFormatError(f"{path}:{lineno}: malformed row ({exc})") from None
            if not 0 <= label < num_classes:
                raise CSVFormatError(f"{path}:{lineno}: label {label} outside [0, {num_classes})")
            feats.append(vals)
            labels.append(label)
    if not feats:
        raise CSVFormatError(f"{path}: no data rows")
    return TaskDataset(np.array(feats), np.array(labels), split, task_id or path.stem)


def write_csv(dataset: TaskDataset, path) -> None:
    path = Path(path)
    d = dataset.features.shape[1]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{i}" for i in range(d)] + ["label"])
        for x, y in zip(dataset.features, dataset.labels):
            w.writerow([repr(float(v)) for v in x] + [int(y)])
