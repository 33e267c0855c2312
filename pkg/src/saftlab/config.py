"""Strict JSON experiment configuration with recorded defaults."""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .diagnostics import DEFAULT_CTL_LAMBDA, DEFAULT_FIXED_ALPHA, DEFAULT_SEGMENT_POINTS
from .merge import DEFAULT_ALPHA_GRID, DEFAULT_PRUNE_GRID, METHODS
from .optim import OptimizerConfig, SharpnessConfig, TrainConfig
from .taskgen import SuiteConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    hidden_sizes: tuple[int, ...] = (32,)
    activation: str = "tanh"


@dataclass(frozen=True)
class StageConfig:
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    sharpness: SharpnessConfig = field(default_factory=SharpnessConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


@dataclass(frozen=True)
class TaskPaths:
    id: str
    train: str
    test: str
    val: str | None = None


@dataclass(frozen=True)
class DataConfig:
    num_classes: int
    pretrain: str
    tasks: tuple[TaskPaths, ...]
    val_ratio: float = 0.1


@dataclass(frozen=True)
class MergeSettings:
    methods: tuple[str, ...] = METHODS
    alpha_grid: tuple[float, ...] = DEFAULT_ALPHA_GRID
    prune_grid: tuple[float, ...] = DEFAULT_PRUNE_GRID
    election: str = "mass"


@dataclass(frozen=True)
class AxisConfig:
    start: float = -0.5
    stop: float = 1.5
    num: int = 21


@dataclass(frozen=True)
class PowerConfig:
    max_iters: int = 500
    tol: float = 1e-8
    shift: float = 0.0


@dataclass(frozen=True)
class DiagnosticsConfig:
    pairs: tuple[tuple[int, int], ...] = ((0, 1),)
    xi_pair: bool = True
    xi_all: bool = True
    jtl: bool = True
    jtl_all: bool = True
    ctl: bool = True
    barrier: bool = True
    jtl_gap: bool = True
    eigen_minima: bool = True
    eigen_segment: bool = True
    jtl_bound: bool = True
    axis: AxisConfig = field(default_factory=AxisConfig)
    fixed_alpha: float = DEFAULT_FIXED_ALPHA
    ctl_lambda: float = DEFAULT_CTL_LAMBDA
    segment_points: int = DEFAULT_SEGMENT_POINTS
    barrier_points: int = 11
    bound_alpha: float = 0.5
    merge_method: str = "arithmetic"
    power: PowerConfig = field(default_factory=PowerConfig)


def _default_pretrain() -> StageConfig:
    return StageConfig(OptimizerConfig(lr=1e-2), SharpnessConfig(),
                       TrainConfig(steps=500, batch_size=64, eval_every=50))


def _default_finetune() -> StageConfig:
    return StageConfig(OptimizerConfig(lr=1e-2), SharpnessConfig(mode="asam"),
                       TrainConfig(steps=200, batch_size=32, eval_every=20))


@dataclass(frozen=True)
class ExperimentConfig:
    suite: SuiteConfig | None = None
    data: DataConfig | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: StageConfig = field(default_factory=_default_pretrain)
    finetune: StageConfig = field(default_factory=_default_finetune)
    task_overrides: dict[str, StageConfig] = field(default_factory=dict)
    merge: MergeSettings = field(default_factory=MergeSettings)
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)
    output_dir: str = "runs/default"
    seed: int = 0

    def stage_for(self, task_id: str) -> StageConfig:
        return self.task_overrides.get(task_id, self.finetune)

    @property
    def linearized(self) -> bool:
        return self.finetune.train.linearized


def _type_name(tp) -> str:
    return getattr(tp, "__name__", str(tp))


def _convert(value, tp, where: str):
    """Coerce a JSON value to the annotated type, raising ConfigError naming ``where``."""
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(value, inner[0], where)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object")
        return _build(tp, value, where)
    if origin is tuple:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(v, args[0], f"{where}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(f"{where}: expected {len(args)} entries")
        return tuple(_convert(v, a, f"{where}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object")
        return {str(k): _convert(v, args[1], f"{where}.{k}") for k, v in value.items()}
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    raise ConfigError(f"{where}: unsupported type {_type_name(tp)}")


def _build(cls, data: dict, where: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown field {unknown[0]!r}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if not f.init:
            continue
        path = f"{where}.{f.name}" if where else f.name
        if f.name in data:
            kwargs[f.name] = _convert(data[f.name], hints[f.name], path)
        elif f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            raise ConfigError(f"{path}: missing required field")
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def _validate(cfg: ExperimentConfig) -> None:
    if (cfg.suite is None) == (cfg.data is None):
        raise ConfigError("exactly one of 'suite' or 'data' must be given")
    n_tasks = cfg.suite.num_tasks if cfg.suite else len(cfg.data.tasks)
    ids = [f"task{t}" for t in range(n_tasks)] if cfg.suite else [t.id for t in cfg.data.tasks]
    for tid in cfg.task_overrides:
        if tid not in ids:
            raise ConfigError(f"task_overrides: unknown task {tid!r}")
    lin = {cfg.stage_for(t).train.linearized for t in ids}
    if len(lin) > 1:
        raise ConfigError("task_overrides: linearized must agree across tasks")
    for m in cfg.merge.methods:
        if m not in METHODS:
            raise ConfigError(f"merge.methods: unknown method {m!r}")
    if cfg.merge.election not in ("mass", "count"):
        raise ConfigError(f"merge.election: unknown rule {cfg.merge.election!r}")
    for i, j in cfg.diagnostics.pairs:
        if not (0 <= i < n_tasks and 0 <= j < n_tasks and i != j):
            raise ConfigError(f"diagnostics.pairs: invalid pair ({i}, {j})")
    if cfg.diagnostics.merge_method not in METHODS:
        raise ConfigError(f"diagnostics.merge_method: unknown method {cfg.diagnostics.merge_method!r}")
    if cfg.diagnostics.axis.num < 1:
        raise ConfigError("diagnostics.axis.num: must be positive")


def _defaults_used(cls, data: dict, prefix: str = "") -> list[str]:
    """Dotted names of every field filled from a default."""
    out = []
    hints = typing.get_type_hints(cls)
    for f in dataclasses.fields(cls):
        if not f.init:
            continue
        name = f"{prefix}{f.name}"
        tp = hints[f.name]
        inner = [a for a in typing.get_args(tp) if dataclasses.is_dataclass(a)]
        sub_cls = tp if dataclasses.is_dataclass(tp) else (inner[0] if inner else None)
        if f.name not in data:
            out.append(name)
        elif sub_cls is not None and isinstance(data[f.name], dict):
            out.extend(_defaults_used(sub_cls, data[f.name], name + "."))
    return out


def parse_config_dict(data: dict) -> tuple[ExperimentConfig, list[str]]:
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    cfg = _build(ExperimentConfig, data, "")
    _validate(cfg)
    return cfg, _defaults_used(ExperimentConfig, data)


def parse_config(path) -> tuple[ExperimentConfig, list[str]]:
    """Returns the config and the list of fields that took default values."""
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config_dict(data)


def to_jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj) if f.init}
    if isinstance(obj, dict):
        return {k: to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    return obj
