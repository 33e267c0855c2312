"""Base optimizers, sharpness-aware perturbations and the fine-tuning loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .nn import ModelSpec, TaskDataset

log = logging.getLogger(__name__)

DEGENERATE_NORM = 1e-12
DEFAULT_RHO = 0.5


@dataclass(frozen=True)
class OptimizerConfig:
    base: str = "adamw"
    lr: float = 1e-2
    momentum: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    eps: float = 1e-8

    def __post_init__(self):
        if self.base not in ("sgd", "adamw"):
            raise ValueError(f"unknown base optimizer {self.base!r}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ValueError("betas must be a pair in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")


@dataclass(frozen=True)
class SharpnessConfig:
    mode: str = "none"
    rho: float = DEFAULT_RHO
    asam_norm: str = "paper"

    def __post_init__(self):
        if self.mode not in ("none", "sam", "asam"):
            raise ValueError(f"unknown sharpness mode {self.mode!r}")
        if self.rho < 0:
            raise ValueError("rho must be nonnegative")
        if self.asam_norm not in ("paper", "original"):
            raise ValueError(f"unknown asam_norm {self.asam_norm!r}")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 200
    batch_size: int = 32
    schedule: str = "cosine"
    warmup_steps: int = 0
    linearized: bool = False
    seed: int = 0
    eval_every: int = 20

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("steps, batch_size and eval_every must be positive")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if not 0 <= self.warmup_steps < self.steps:
            raise ValueError("warmup_steps must lie in [0, steps)")


def sam_perturbation(grad: np.ndarray, rho: float) -> np.ndarray:
    """rho * g / ||g||, or zeros at an exact stationary point."""
    grad = np.asarray(grad, dtype=np.float64)
    norm = np.linalg.norm(grad)
    if norm < DEGENERATE_NORM:
        return np.zeros_like(grad)
    return rho * grad / norm


def asam_perturbation(params: np.ndarray, grad: np.ndarray, rho: float, norm_mode: str = "paper") -> np.ndarray:
    """Parameter-scaled perturbation rho * theta^2 * g / denom.

    ``norm_mode="paper"`` divides by ||g||; ``"original"`` divides by
    ||theta * g|| as in the adaptive SAM publication (without its eta offset).
    """
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape:
        raise ValueError(f"params {params.shape} and grad {grad.shape} differ in shape")
    if norm_mode == "paper":
        denom = np.linalg.norm(grad)
    elif norm_mode == "original":
        denom = np.linalg.norm(params * grad)
    else:
        raise ValueError(f"unknown norm_mode {norm_mode!r}")
    if denom < DEGENERATE_NORM:
        return np.zeros_like(grad)
    return rho * (params * params * grad) / denom


def perturbation(params, grad, cfg: SharpnessConfig) -> np.ndarray | None:
    """Perturbation for the configured mode; None means no second pass."""
    if cfg.mode == "none":
        return None
    if cfg.mode == "sam":
        return sam_perturbation(grad, cfg.rho)
    return asam_perturbation(params, grad, cfg.rho, cfg.asam_norm)


@dataclass
class OptimizerState:
    step: int = 0
    buf: np.ndarray | None = None
    exp_avg: np.ndarray | None = None
    exp_avg_sq: np.ndarray | None = None

    @classmethod
    def init(cls, n: int, config: OptimizerConfig) -> "OptimizerState":
        if config.base == "sgd":
            return cls(buf=np.zeros(n))
        return cls(exp_avg=np.zeros(n), exp_avg_sq=np.zeros(n))


def optimizer_step(state: OptimizerState, params: np.ndarray, grad: np.ndarray, lr: float,
                   config: OptimizerConfig) -> tuple[np.ndarray, OptimizerState]:
    """One SGD or AdamW update with decoupled weight decay. Inputs are not mutated."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.shape:
        raise ValueError("gradient and parameters differ in length")
    ref = state.buf if config.base == "sgd" else state.exp_avg
    if ref is None or ref.shape != params.shape:
        raise ValueError("optimizer state not initialised for this parameter length")
    if not lr > 0:
        raise ValueError("lr must be positive")

    t = state.step + 1
    decayed = params * (1.0 - lr * config.weight_decay) if config.weight_decay else params
    if config.base == "sgd":
        buf = config.momentum * state.buf + grad if config.momentum else grad
        return decayed - lr * buf, OptimizerState(step=t, buf=buf)

    b1, b2 = config.betas
    m = b1 * state.exp_avg + (1.0 - b1) * grad
    v = b2 * state.exp_avg_sq + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1 ** t)
    v_hat = v / (1.0 - b2 ** t)
    new = decayed - lr * m_hat / (np.sqrt(v_hat) + config.eps)
    return new, OptimizerState(step=t, exp_avg=m, exp_avg_sq=v)


def lr_schedule(step: int, base_lr: float, config: TrainConfig) -> float:
    """Linear warmup followed by cosine decay to zero (or a constant plateau)."""
    if not 0 <= step < config.steps:
        raise ValueError(f"step {step} outside [0, {config.steps})")
    if step < config.warmup_steps:
        return base_lr * (step + 1) / config.warmup_steps
    if config.schedule == "constant":
        return base_lr
    progress = (step - config.warmup_steps) / (config.steps - config.warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class FineTuneResult:
    final_params: np.ndarray
    best_params: np.ndarray
    best_step: int
    best_val_acc: float
    eval_steps: list[int]
    loss_curve: list[float]
    val_acc_curve: list[float]
    seed: int
    config: dict = field(default_factory=dict)


def batch_indices(n: int, batch_size: int, steps: int, seed: int):
    """Yields index arrays; each epoch uses a permutation seeded by (seed, epoch)."""
    if batch_size > n:
        raise ValueError(f"batch_size {batch_size} exceeds training set size {n}")
    per_epoch = n // batch_size
    epoch, pos, perm = 0, per_epoch, None
    for _ in range(steps):
        if pos == per_epoch:
            perm = np.random.default_rng([seed, epoch]).permutation(n)
            epoch += 1
            pos = 0
        yield perm[pos * batch_size:(pos + 1) * batch_size]
        pos += 1


class NonFiniteLoss(RuntimeError):
    pass


def sharpness_step(params, batch, spec, state, lr, opt_cfg, sharp_cfg, linearize_at=None):
    """Two-pass sharpness-aware update on one minibatch.

    Returns ``(new_params, new_state, g_used)`` where ``g_used`` is the gradient
    fed to the base optimizer (evaluated at the perturbed point when a
    sharpness mode is active).
    """
    g = nn.gradient(params, spec, batch, linearize_at)
    eps = perturbation(params, g, sharp_cfg)
    if eps is not None:
        g = nn.gradient(params + eps, spec, batch, linearize_at)
    new, state = optimizer_step(state, params, g, lr, opt_cfg)
    return new, state, g


def finetune(base_params: np.ndarray, spec: ModelSpec, train_set: TaskDataset, val_set: TaskDataset,
             opt_cfg: OptimizerConfig, sharp_cfg: SharpnessConfig, train_cfg: TrainConfig,
             on_step=None) -> FineTuneResult:
    """Minibatch training from ``base_params`` keeping the best validation checkpoint.

    Validation runs before the first update and then after every
    ``eval_every`` updates (and after the last one). ``on_step`` is an
    optional hook ``(step, params_before, params_after, g_used)``.
    """
    base = nn.check_params(base_params, spec)
    for ds in (train_set, val_set):
        nn._check_dataset(ds, spec)
        if ds.features.shape[1] != spec.input_dim:
            raise ValueError("dataset width does not match the model input")
    lin = base if train_cfg.linearized else None

    params = base.copy()
    state = OptimizerState.init(spec.n_params, opt_cfg)
    eval_steps, losses, accs = [], [], []
    best = (-1.0, 0, params)

    def evaluate(step, p):
        nonlocal best
        val_loss = nn.loss(p, spec, val_set, lin)
        if not np.isfinite(val_loss):
            raise NonFiniteLoss(f"non-finite validation loss at step {step}")
        acc = nn.accuracy(p, spec, val_set, lin)
        eval_steps.append(step)
        losses.append(val_loss)
        accs.append(acc)
        if acc > best[0]:
            best = (acc, step, p.copy())

    evaluate(0, params)
    batches = batch_indices(len(train_set), train_cfg.batch_size, train_cfg.steps, train_cfg.seed)
    for step, idx in enumerate(batches):
        lr = lr_schedule(step, opt_cfg.lr, train_cfg)
        new, state, g = sharpness_step(params, train_set.subset(idx), spec, state, lr,
                                       opt_cfg, sharp_cfg, lin)
        if not np.all(np.isfinite(new)):
            raise NonFiniteLoss(f"non-finite parameters after step {step}")
        if on_step is not None:
            on_step(step, params, new, g)
        params = new
        done = step + 1
        if done % train_cfg.eval_every == 0 or done == train_cfg.steps:
            evaluate(done, params)

    log.debug("finetune done: best val acc %.4f at step %d", best[0], best[1])
    return FineTuneResult(
        final_params=params,
        best_params=best[2],
        best_step=best[1],
        best_val_acc=best[0],
        eval_steps=eval_steps,
        loss_curve=losses,
        val_acc_curve=accs,
        seed=train_cfg.seed,
        config={"optimizer": asdict(opt_cfg), "sharpness": asdict(sharp_cfg), "train": asdict(train_cfg)},
    )
