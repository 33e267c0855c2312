"""Interference diagnostics over merged and interpolated parameter vectors.

Grids are evaluated cell by cell with no shared state, so results do not
depend on evaluation order. Power-iteration start vectors are derived from
``(seed, index)`` for the same reason.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import nn
from .merge import TaskVector, _check_taus
from .nn import DatasetObjective, ModelSpec, Objective, TaskDataset

log = logging.getLogger(__name__)

DEFAULT_AXIS = tuple(np.linspace(-0.5, 1.5, 21))
RED_BOX = (0.1, 1.0)
DEFAULT_FIXED_ALPHA = 0.3
DEFAULT_CTL_LAMBDA = 0.3
DEFAULT_SEGMENT_POINTS = 11


@dataclass
class GridScan:
    alpha1_axis: np.ndarray
    alpha2_axis: np.ndarray
    values: np.ndarray
    metric: str
    context: dict = field(default_factory=dict)

    def __post_init__(self):
        self.alpha1_axis = np.asarray(self.alpha1_axis, dtype=np.float64)
        self.alpha2_axis = np.asarray(self.alpha2_axis, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.alpha1_axis.size, self.alpha2_axis.size):
            raise ValueError("grid values do not match the axes")
        if self.metric not in ("xi_pair", "xi_all", "jtl_loss"):
            raise ValueError(f"unknown grid metric {self.metric!r}")

    def region_mean(self, lo: float = RED_BOX[0], hi: float = RED_BOX[1]) -> float:
        """Mean value over cells with both coefficients in [lo, hi]."""
        tol = 1e-9
        r = (self.alpha1_axis >= lo - tol) & (self.alpha1_axis <= hi + tol)
        c = (self.alpha2_axis >= lo - tol) & (self.alpha2_axis <= hi + tol)
        return float(self.values[np.ix_(r, c)].mean())


@dataclass
class Curve:
    abscissa: np.ndarray
    values: np.ndarray
    kind: str
    context: dict = field(default_factory=dict)

    def __post_init__(self):
        self.abscissa = np.asarray(self.abscissa, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.abscissa.shape != self.values.shape:
            raise ValueError("curve abscissa and values differ in length")
        if np.any(np.diff(self.abscissa) <= 0):
            raise ValueError("curve abscissa must be strictly increasing")
        if self.kind not in ("loss_barrier", "eigenvalue_segment", "jtl_gap"):
            raise ValueError(f"unknown curve kind {self.kind!r}")


def _map(fn, items, threads: int):
    if threads and threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def output_distance(logits_a: np.ndarray, logits_b: np.ndarray) -> float:
    """Fraction of rows whose predicted classes disagree."""
    if np.shape(logits_a) != np.shape(logits_b):
        raise ValueError("logit matrices differ in shape")
    return float(np.mean(nn.predictions(logits_a) != nn.predictions(logits_b)))


def _grid(axis1, axis2, cell: Callable[[float, float], float], threads: int) -> np.ndarray:
    cells = [(a1, a2) for a1 in axis1 for a2 in axis2]
    vals = _map(lambda c: cell(*c), cells, threads)
    return np.array(vals, dtype=np.float64).reshape(len(axis1), len(axis2))


def _xi_grid(theta_0, tau_1, tau_2, rest, data_1, data_2, spec, axis1, axis2, distance, threads,
             linearize_at):
    theta_0 = np.asarray(theta_0, dtype=np.float64)
    _check_taus(theta_0, [tau_1, tau_2, *rest])
    for ds in (data_1, data_2):
        if len(ds) == 0:
            raise ValueError("empty dataset in disentanglement scan")
    base = theta_0 + sum(t.values for t in rest) if rest else theta_0

    def f(p, x):
        return nn.predict_logits(p, spec, x, linearize_at)

    def cell(a1, a2):
        merged = base + a1 * tau_1.values + a2 * tau_2.values
        err = distance(f(theta_0 + a1 * tau_1.values, data_1.features), f(merged, data_1.features))
        err += distance(f(theta_0 + a2 * tau_2.values, data_2.features), f(merged, data_2.features))
        return err

    return _grid(axis1, axis2, cell, threads)


def disentanglement_grid_pair(theta_0, tau_1: TaskVector, tau_2: TaskVector, data_1: TaskDataset,
                              data_2: TaskDataset, spec: ModelSpec, axis1=DEFAULT_AXIS, axis2=None,
                              distance=output_distance, threads: int = 0, linearize_at=None) -> GridScan:
    """Two-task disentanglement error over a coefficient grid."""
    axis2 = axis1 if axis2 is None else axis2
    values = _xi_grid(theta_0, tau_1, tau_2, [], data_1, data_2, spec, axis1, axis2, distance,
                      threads, linearize_at)
    return GridScan(axis1, axis2, values, "xi_pair",
                    {"tasks": [tau_1.task_id, tau_2.task_id], "red_box": list(RED_BOX)})


def disentanglement_grid_all(theta_0, all_taus: Sequence[TaskVector], pair: tuple[int, int],
                             data_1: TaskDataset, data_2: TaskDataset, spec: ModelSpec,
                             fixed_alpha: float = DEFAULT_FIXED_ALPHA, axis1=DEFAULT_AXIS, axis2=None,
                             distance=output_distance, threads: int = 0, linearize_at=None) -> GridScan:
    """Disentanglement error when every other task vector is added at ``fixed_alpha``."""
    if len(all_taus) < 2:
        raise ValueError("need at least two task vectors")
    i, j = pair
    rest = [t.scaled(fixed_alpha) for k, t in enumerate(all_taus) if k not in (i, j)]
    axis2 = axis1 if axis2 is None else axis2
    values = _xi_grid(theta_0, all_taus[i], all_taus[j], rest, data_1, data_2, spec, axis1, axis2,
                      distance, threads, linearize_at)
    return GridScan(axis1, axis2, values, "xi_all",
                    {"tasks": [all_taus[i].task_id, all_taus[j].task_id], "fixed_alpha": fixed_alpha,
                     "others": [t.task_id for t in rest], "red_box": list(RED_BOX)})


def jtl_landscape_grid(theta_0, tau_1: TaskVector, tau_2: TaskVector, data_1: TaskDataset,
                       data_2: TaskDataset, spec: ModelSpec, extra_taus: Sequence[TaskVector] = (),
                       fixed_alpha: float = DEFAULT_FIXED_ALPHA, axis1=DEFAULT_AXIS, axis2=None,
                       threads: int = 0, linearize_at=None) -> GridScan:
    """Joint-task loss L(merge; D1) + L(merge; D2) over the coefficient grid."""
    theta_0 = np.asarray(theta_0, dtype=np.float64)
    _check_taus(theta_0, [tau_1, tau_2, *extra_taus])
    axis2 = axis1 if axis2 is None else axis2
    base = theta_0 + sum(fixed_alpha * t.values for t in extra_taus) if extra_taus else theta_0

    def cell(a1, a2):
        merged = base + a1 * tau_1.values + a2 * tau_2.values
        return nn.loss(merged, spec, data_1, linearize_at) + nn.loss(merged, spec, data_2, linearize_at)

    values = _grid(axis1, axis2, cell, threads)
    ctx = {"tasks": [tau_1.task_id, tau_2.task_id], "red_box": list(RED_BOX)}
    if extra_taus:
        ctx.update(fixed_alpha=fixed_alpha, others=[t.task_id for t in extra_taus])
    return GridScan(axis1, axis2, values, "jtl_loss", ctx)


def ctl_block_metric(theta_0, tau_s: TaskVector, tau_t: TaskVector, data_union: TaskDataset,
                     spec: ModelSpec, lam: float = DEFAULT_CTL_LAMBDA) -> tuple[np.ndarray, int]:
    """Per-block E[1 - cos] between merged features and the mean of scaled single-task features.

    Returns ``(scores, n_zero)``; rows where either feature vector has zero
    norm count as aligned and are tallied in ``n_zero``.
    """
    theta_0 = np.asarray(theta_0, dtype=np.float64)
    _check_taus(theta_0, [tau_s, tau_t])
    x = data_union.features
    merged = theta_0 + lam * (tau_s.values + tau_t.values)
    only_s = theta_0 + 2 * lam * tau_s.values
    only_t = theta_0 + 2 * lam * tau_t.values
    scores = np.empty(spec.n_blocks)
    n_zero = 0
    for li in range(spec.n_blocks):
        a = nn.layer_features(merged, spec, x, li)
        b = 0.5 * nn.layer_features(only_s, spec, x, li) + 0.5 * nn.layer_features(only_t, spec, x, li)
        na = np.linalg.norm(a, axis=1)
        nb = np.linalg.norm(b, axis=1)
        ok = (na > 0) & (nb > 0)
        cos = np.ones(x.shape[0])
        cos[ok] = (a[ok] * b[ok]).sum(axis=1) / (na[ok] * nb[ok])
        n_zero += int((~ok).sum())
        scores[li] = float(np.mean(1.0 - cos))
    if n_zero:
        log.warning("CTL: %d zero-norm feature rows treated as aligned", n_zero)
    return scores, n_zero


def loss_barrier_path(theta_a, theta_b, dataset: TaskDataset, spec: ModelSpec, n_points: int = 11,
                      linearize_at=None) -> Curve:
    """Loss along (1 - s) theta_a + s theta_b for evenly spaced s in [0, 1]."""
    if n_points < 2:
        raise ValueError("n_points must be at least 2")
    theta_a = nn.check_params(theta_a, spec)
    theta_b = nn.check_params(theta_b, spec)
    s = np.linspace(0.0, 1.0, n_points)
    vals = []
    for si in s:
        # Endpoints are evaluated on the exact inputs.
        p = theta_a if si == 0.0 else theta_b if si == 1.0 else (1 - si) * theta_a + si * theta_b
        vals.append(nn.loss(p, spec, dataset, linearize_at))
    return Curve(s, np.array(vals), "loss_barrier")


def mlp_objectives(spec: ModelSpec, data_s: TaskDataset, data_t: TaskDataset, linearize_at=None):
    return DatasetObjective(spec, data_s, linearize_at), DatasetObjective(spec, data_t, linearize_at)


def jtl(params, obj_s: Objective, obj_t: Objective) -> float:
    return obj_s.loss(params) + obj_t.loss(params)


def jtl_gap(theta_s, theta_t, alpha: float, obj_s: Objective, obj_t: Objective) -> float:
    """JTL of the interpolated model minus the interpolation of endpoint JTLs."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    theta_s = np.asarray(theta_s, dtype=np.float64)
    theta_t = np.asarray(theta_t, dtype=np.float64)
    if theta_s.shape != theta_t.shape:
        raise ValueError("endpoints differ in length")
    if alpha in (0.0, 1.0):
        return 0.0
    mid = alpha * theta_s + (1 - alpha) * theta_t
    return jtl(mid, obj_s, obj_t) - alpha * jtl(theta_s, obj_s, obj_t) - (1 - alpha) * jtl(theta_t, obj_s, obj_t)


def jtl_gap_curve(theta_s, theta_t, obj_s, obj_t, n_points: int = 11) -> Curve:
    a = np.linspace(0.0, 1.0, n_points)
    return Curve(a, np.array([jtl_gap(theta_s, theta_t, ai, obj_s, obj_t) for ai in a]), "jtl_gap")


@dataclass
class EigenResult:
    value: float
    iterations: int
    converged: bool


def dominant_eigenvalue(params, objective: Objective, max_iters: int = 1000, tol: float = 1e-10,
                        shift: float = 0.0, seed: int = 0) -> EigenResult:
    """Largest-magnitude eigenvalue of (H + shift I) by power iteration, minus ``shift``.

    Stops once successive Rayleigh quotients agree to ``tol * max(1, |q|)``.
    """
    if max_iters < 1 or not tol > 0 or shift < 0:
        raise ValueError("need max_iters >= 1, tol > 0 and shift >= 0")
    params = np.asarray(params, dtype=np.float64)
    v = np.random.default_rng(seed).standard_normal(params.shape[0])
    v /= np.linalg.norm(v)
    prev = None
    q = 0.0
    for it in range(1, max_iters + 1):
        hv = objective.hvp(params, v) + shift * v
        q = float(v @ hv)
        norm = np.linalg.norm(hv)
        if norm == 0.0:
            # v lies in the null space of the shifted operator.
            return EigenResult(q - shift, it, True)
        if prev is not None and abs(q - prev) < tol * max(1.0, abs(q)):
            return EigenResult(q - shift, it, True)
        prev = q
        v = hv / norm
    log.warning("power iteration did not converge in %d iterations", max_iters)
    return EigenResult(q - shift, max_iters, False)


def eigenvalue_along_segment(theta_0, theta_t, objective: Objective, n_points: int = DEFAULT_SEGMENT_POINTS,
                             seed: int = 0, threads: int = 0, **power_kw) -> Curve:
    """Dominant eigenvalue at theta_0 + gamma (theta_t - theta_0), gamma evenly spaced in [0, 1]."""
    if n_points < 2:
        raise ValueError("n_points must be at least 2")
    theta_0 = np.asarray(theta_0, dtype=np.float64)
    theta_t = np.asarray(theta_t, dtype=np.float64)
    gammas = np.linspace(0.0, 1.0, n_points)

    def point(i):
        g = gammas[i]
        p = theta_0 if g == 0.0 else theta_t if g == 1.0 else theta_0 + g * (theta_t - theta_0)
        return dominant_eigenvalue(p, objective, seed=seed, **power_kw)

    results = _map(point, range(n_points), threads)
    return Curve(gammas, np.array([r.value for r in results]), "eigenvalue_segment",
                 {"converged": [r.converged for r in results]})


@dataclass
class BoundCheck:
    abs_delta: float
    bound: float
    residual: float
    lambda_s: float
    lambda_t: float


def jtl_bound_check(theta_s, theta_t, alpha: float, obj_s: Objective, obj_t: Objective,
                    seed: int = 0, **power_kw) -> BoundCheck:
    """|delta| against 0.5 a (1 - a) (lambda_s + lambda_t) ||theta_t - theta_s||^2.

    ``lambda_s`` is taken at theta_s on the s-objective and ``lambda_t`` at
    theta_t on the t-objective. ``residual`` is the part of |delta| the
    leading term does not cover (zero when the bound holds).
    """
    delta = jtl_gap(theta_s, theta_t, alpha, obj_s, obj_t)
    lam_s = dominant_eigenvalue(theta_s, obj_s, seed=seed, **power_kw).value
    lam_t = dominant_eigenvalue(theta_t, obj_t, seed=seed + 1, **power_kw).value
    diff = np.asarray(theta_t, dtype=np.float64) - np.asarray(theta_s, dtype=np.float64)
    bound = 0.5 * alpha * (1 - alpha) * (lam_s + lam_t) * float(diff @ diff)
    return BoundCheck(abs(delta), bound, max(0.0, abs(delta) - bound), lam_s, lam_t)
