"""Task vectors and the merging methods built on them."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nn
from .nn import ModelSpec, TaskDataset

DEFAULT_ALPHA_GRID = (0.1, 0.3, 0.5, 0.7, 0.9, 1.0)
DEFAULT_PRUNE_GRID = (0.7, 0.8, 0.9)
METHODS = ("average", "arithmetic", "ties")


class BaseMismatch(ValueError):
    """Task vectors were extracted from different base checkpoints."""


def params_digest(params: np.ndarray) -> str:
    arr = np.ascontiguousarray(params, dtype="<f8")
    return hashlib.sha256(arr.tobytes()).hexdigest()


def two_sum(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Error-free sum: ``s + err == a + b`` exactly, with ``s = fl(a + b)``."""
    s = a + b
    bb = s - a
    return s, (a - (s - bb)) + (b - bb)


def compensated_sum(terms: Sequence[np.ndarray]) -> np.ndarray:
    """Elementwise sum with the rounding errors carried along and added back once."""
    total = np.array(terms[0], dtype=np.float64)
    carry = np.zeros_like(total)
    for t in terms[1:]:
        total, err = two_sum(total, t)
        carry += err
    return total + carry


@dataclass(frozen=True)
class TaskVector:
    """``values`` is fl(theta_t - theta_0); ``residual`` holds the rounding error of that difference.

    ``values + residual`` equals theta_t - theta_0 exactly, which lets merges
    with unit coefficients land on theta_t bit-for-bit.
    """

    values: np.ndarray
    base_hash: str
    task_id: str = ""
    residual: np.ndarray | None = None

    def __post_init__(self):
        if self.residual is None:
            object.__setattr__(self, "residual", np.zeros_like(self.values))
        if self.residual.shape != self.values.shape:
            raise ValueError("task vector residual has the wrong length")

    def __len__(self):
        return self.values.shape[0]

    def scaled(self, k: float) -> "TaskVector":
        return TaskVector(k * self.values, self.base_hash, self.task_id, k * self.residual)


@dataclass(frozen=True)
class MergeConfig:
    method: str
    alpha: float | None = None
    prune_fraction: float | None = None
    election: str = "mass"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown merge method {self.method!r}")
        if self.method in ("arithmetic", "ties") and self.alpha is None:
            raise ValueError(f"{self.method} merging needs alpha")
        if self.method == "ties":
            if self.prune_fraction is None or not 0 <= self.prune_fraction < 1:
                raise ValueError("ties merging needs prune_fraction in [0, 1)")


def task_vector(theta_t: np.ndarray, theta_0: np.ndarray, task_id: str = "") -> TaskVector:
    theta_t = np.asarray(theta_t, dtype=np.float64)
    theta_0 = np.asarray(theta_0, dtype=np.float64)
    if theta_t.shape != theta_0.shape:
        raise ValueError("fine-tuned and base parameters differ in length")
    values, residual = two_sum(theta_t, -theta_0)
    return TaskVector(values, params_digest(theta_0), task_id, residual)


def _check_taus(theta_0: np.ndarray, taus: Sequence[TaskVector]) -> str:
    digest = params_digest(theta_0)
    for tau in taus:
        if tau.base_hash != digest:
            raise BaseMismatch(f"task vector {tau.task_id!r} was not extracted from this base checkpoint")
        if tau.values.shape != theta_0.shape:
            raise ValueError(f"task vector {tau.task_id!r} has the wrong length")
    return digest


def merge_arithmetic(theta_0: np.ndarray, taus: Sequence[TaskVector], alphas: Sequence[float]) -> np.ndarray:
    """theta_0 + sum_t alpha_t tau_t."""
    theta_0 = np.asarray(theta_0, dtype=np.float64)
    _check_taus(theta_0, taus)
    if len(alphas) != len(taus):
        raise ValueError(f"{len(alphas)} coefficients for {len(taus)} task vectors")
    terms = [theta_0]
    for a, tau in zip(alphas, taus):
        terms += [a * tau.values, a * tau.residual]
    return compensated_sum(terms)


def merge_average(thetas: Sequence[np.ndarray]) -> np.ndarray:
    if len(thetas) == 0:
        raise ValueError("nothing to average")
    shape = np.shape(thetas[0])
    if any(np.shape(t) != shape for t in thetas):
        raise ValueError("models differ in parameter length")
    return np.mean(np.stack(thetas), axis=0)


def trim(values: np.ndarray, prune_fraction: float) -> np.ndarray:
    """Zero the floor(prune_fraction * n) smallest-magnitude entries (lower index first on ties)."""
    if not 0 <= prune_fraction < 1:
        raise ValueError("prune_fraction must lie in [0, 1)")
    k = math.floor(prune_fraction * values.shape[0])
    out = values.copy()
    if k:
        order = np.argsort(np.abs(values), kind="stable")
        out[order[:k]] = 0.0
    return out


def elect_signs(trimmed: np.ndarray, election: str = "mass") -> np.ndarray:
    """Per-coordinate sign (+1/-1) over rows of ``trimmed``; zero totals elect +1."""
    if election == "mass":
        total = trimmed.sum(axis=0)
    elif election == "count":
        total = np.sign(trimmed).sum(axis=0)
    else:
        raise ValueError(f"unknown election rule {election!r}")
    return np.where(total < 0, -1.0, 1.0)


def _agree(trimmed: np.ndarray, signs: np.ndarray) -> np.ndarray:
    return np.sign(trimmed) == signs


def disjoint_mean(trimmed: np.ndarray, signs: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Per-coordinate mean over the rows whose sign matches ``signs`` (0 where none do)."""
    agree = _agree(trimmed, signs) if mask is None else mask
    count = agree.sum(axis=0)
    total = np.where(agree, trimmed, 0.0).sum(axis=0)
    return np.divide(total, count, out=np.zeros_like(total), where=count > 0)


def ties_merge(theta_0: np.ndarray, taus: Sequence[TaskVector], alpha: float, prune_fraction: float,
               election: str = "mass") -> np.ndarray:
    """Trim, elect signs, then average the sign-consistent entries."""
    theta_0 = np.asarray(theta_0, dtype=np.float64)
    _check_taus(theta_0, taus)
    if not taus:
        raise ValueError("no task vectors to merge")
    trimmed = np.stack([trim(t.values, prune_fraction) for t in taus])
    agree = _agree(trimmed, elect_signs(trimmed, election))
    # Residuals follow their coordinate's trim and election outcome.
    residual = np.stack([np.where(tr != 0, t.residual, 0.0) for tr, t in zip(trimmed, taus)])
    merged = disjoint_mean(trimmed, None, agree)
    merged_res = disjoint_mean(residual, None, agree)
    return compensated_sum([theta_0, alpha * merged, alpha * merged_res])


def apply_merge(theta_0, taus, config: MergeConfig) -> np.ndarray:
    if config.method == "average":
        _check_taus(np.asarray(theta_0, dtype=np.float64), taus)
        return merge_average([merge_arithmetic(theta_0, [t], [1.0]) for t in taus])
    if config.method == "arithmetic":
        return merge_arithmetic(theta_0, taus, [config.alpha] * len(taus))
    return ties_merge(theta_0, taus, config.alpha, config.prune_fraction, config.election)


@dataclass
class SearchResult:
    config: MergeConfig
    params: np.ndarray
    table: list[dict]


def coefficient_search(theta_0: np.ndarray, taus: Sequence[TaskVector], method: str,
                       val_sets: Sequence[TaskDataset], spec: ModelSpec,
                       alpha_grid: Sequence[float] = DEFAULT_ALPHA_GRID,
                       prune_grid: Sequence[float] = DEFAULT_PRUNE_GRID,
                       election: str = "mass", linearize_at=None) -> SearchResult:
    """Shared-coefficient grid search scored by mean validation accuracy over tasks.

    Ties go to the smaller alpha, then the smaller prune fraction. Weight
    averaging has no free coefficient and is scored once.
    """
    if len(val_sets) != len(taus):
        raise ValueError("need one validation set per task vector")
    if method == "average":
        candidates = [MergeConfig("average")]
    elif method == "arithmetic":
        if not alpha_grid:
            raise ValueError("empty alpha grid")
        candidates = [MergeConfig("arithmetic", alpha=float(a)) for a in sorted(alpha_grid)]
    elif method == "ties":
        if not alpha_grid or not prune_grid:
            raise ValueError("empty alpha or prune grid")
        candidates = [MergeConfig("ties", alpha=float(a), prune_fraction=float(p), election=election)
                      for a in sorted(alpha_grid) for p in sorted(prune_grid)]
    else:
        raise ValueError(f"unknown merge method {method!r}")

    table = []
    best = None
    for cfg in candidates:
        merged = apply_merge(theta_0, taus, cfg)
        accs = [nn.accuracy(merged, spec, ds, linearize_at) for ds in val_sets]
        score = float(np.mean(accs))
        table.append({"alpha": cfg.alpha, "prune_fraction": cfg.prune_fraction,
                      "score": score, "per_task": accs})
        # Candidates are visited in tie-break order, so strict improvement suffices.
        if best is None or score > best[0]:
            best = (score, cfg, merged)
    return SearchResult(best[1], best[2], table)
