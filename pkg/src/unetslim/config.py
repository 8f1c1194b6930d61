"""Run configuration: one JSON document per experiment.

Parsing is strict. Unknown keys and wrongly typed values raise
:class:`ConfigError` naming the full key path (``distill.weights.mid``).
"""
from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .compress import CombinationPlan, PlanError, PrunePlan, check_plan, default_prune_plan, m_plan
from .diffkit import ConfigError
from .unet import UNetSpec, make_spec


@dataclass(frozen=True)
class ArchitectureConfig:
    base_channels: int = 32
    channel_multipliers: tuple[int, ...] = (1, 2, 4, 4)
    down_layers: tuple[int, ...] = (2, 2, 2, 2)
    up_layers: tuple[int, ...] = (3, 3, 3, 3)
    down_transformer: tuple[bool, ...] = (True, True, True, False)
    up_transformer: tuple[bool, ...] = (False, True, True, True)
    downsample: tuple[bool, ...] = (True, True, False, False)
    head_dim: int = 16
    ff_mult: int = 2
    latent_channels: int = 4
    latent_size: int = 16
    cond_dim: int = 64
    cond_seq_len: int = 8
    vocab_size: int = 32
    time_embed_dim: int = 64
    norm_groups: int = 8
    T_max: int = 1000


@dataclass(frozen=True)
class CombinationConfig:
    """Either a named plan (``M1``..``M6``) or explicit block assignments."""

    name: str | None = "M2"
    assignments: dict[str, str] | None = None
    freeze_teacher_part: bool | None = None


@dataclass(frozen=True)
class CondConvConfig:
    n_experts: int = 2
    target_blocks: tuple[str, ...] = ()


@dataclass(frozen=True)
class SamplerConfig:
    total_steps: int = 30
    guidance_scale: float = 8.0
    segments: tuple[tuple[str, int], ...] = ()
    models: dict[str, str] = field(default_factory=dict)
    n_samples: int = 1
    prompt: tuple[int, ...] | None = None


@dataclass(frozen=True)
class WeightsConfig:
    task: float = 1.0
    out: float = 1.0
    mid: float = 0.5
    feat: float = 0.1


@dataclass(frozen=True)
class DistillConfig:
    weights: WeightsConfig = WeightsConfig()
    lr: float = 1e-3
    teacher_steps: int = 2000
    stage1_steps: int = 200
    stage2_steps: int = 2000
    cond_dropout: float = 0.1
    eval_every: int = 100
    eval_size: int = 8
    freeze_check_every: int = 50
    probe_seed: int = 0


@dataclass(frozen=True)
class DataConfig:
    size: int = 256
    batch: int = 2


@dataclass(frozen=True)
class PathsConfig:
    teacher_checkpoint: str | None = None
    out_dir: str = "runs/default"


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    architecture: ArchitectureConfig = ArchitectureConfig()
    prune_plan: tuple[tuple[str, int], ...] | None = None
    combination_plan: CombinationConfig = CombinationConfig()
    condconv: CondConvConfig = CondConvConfig()
    sampler: SamplerConfig = SamplerConfig()
    distill: DistillConfig = DistillConfig()
    data: DataConfig = DataConfig()
    paths: PathsConfig = PathsConfig()

    def spec(self) -> UNetSpec:
        return make_spec(**dataclasses.asdict(self.architecture))

    def prune(self, spec: UNetSpec | None = None) -> PrunePlan:
        spec = spec or self.spec()
        return default_prune_plan(spec) if self.prune_plan is None else PrunePlan.of(*self.prune_plan)

    def combination(self) -> CombinationPlan:
        c = self.combination_plan
        if c.assignments is not None:
            return CombinationPlan(dict(c.assignments), True if c.freeze_teacher_part is None else c.freeze_teacher_part)
        plan = m_plan(c.name, len(self.architecture.channel_multipliers))
        if c.freeze_teacher_part is not None:
            plan = dataclasses.replace(plan, freeze_teacher_part=c.freeze_teacher_part)
        return plan

    def with_seed(self, seed: int) -> RunConfig:
        return dataclasses.replace(self, seed=int(seed))


# ------------------------------------------------------------- parsing


def _describe(tp) -> str:
    return getattr(tp, "__name__", str(tp))


def _coerce(tp, value, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        (inner,) = [a for a in args if a is not type(None)]
        return _coerce(inner, value, path)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(f"{path}: expected {len(args)} items, got {len(value)}")
        return tuple(_coerce(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object, got {type(value).__name__}")
        return {str(k): _coerce(args[1], v, f"{path}.{k}") for k, v in value.items()}
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise TypeError(f"{path}: unsupported field type {_describe(tp)}")


def _build(cls, doc, path: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{path or '<root>'}: expected an object, got {type(doc).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in doc:
        if key not in names:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown config key {where!r}")
    kwargs = {}
    for name in names:
        if name in doc:
            kwargs[name] = _coerce(hints[name], doc[name], f"{path}.{name}" if path else name)
    return cls(**kwargs)


def _check_range(ok: bool, path: str, msg: str) -> None:
    if not ok:
        raise ConfigError(f"{path}: {msg}")


def validate(cfg: RunConfig) -> None:
    """Semantic checks; every error names its key path."""
    try:
        spec = cfg.spec()
    except ConfigError as e:
        raise ConfigError(f"architecture: {e}") from None
    try:
        check_plan(spec, cfg.prune(spec))
    except PlanError as e:
        raise ConfigError(f"prune_plan: {e}") from None
    c = cfg.combination_plan
    _check_range(
        (c.name is None) != (c.assignments is None),
        "combination_plan",
        "give exactly one of 'name' or 'assignments'",
    )
    try:
        cfg.combination()
    except PlanError as e:
        raise ConfigError(f"combination_plan.name: {e}") from None
    _check_range(cfg.condconv.n_experts >= 1, "condconv.n_experts", "must be >= 1")
    for i, b in enumerate(cfg.condconv.target_blocks):
        _check_range(b in spec.block_ids(), f"condconv.target_blocks[{i}]", f"no block {b!r}")
    s = cfg.sampler
    _check_range(1 <= s.total_steps <= spec.T_max, "sampler.total_steps", f"must be in [1, {spec.T_max}]")
    _check_range(s.guidance_scale >= 0, "sampler.guidance_scale", "must be >= 0")
    _check_range(s.n_samples >= 1, "sampler.n_samples", "must be >= 1")
    for i, (h, n) in enumerate(s.segments):
        _check_range(n >= 1, f"sampler.segments[{i}]", "segment length must be >= 1")
    if s.prompt is not None:
        _check_range(len(s.prompt) == spec.cond_seq_len, "sampler.prompt", f"needs {spec.cond_seq_len} tokens")
        _check_range(all(0 <= t < spec.vocab_size for t in s.prompt), "sampler.prompt", "token out of vocabulary")
    w = cfg.distill.weights
    ws = (w.task, w.out, w.mid, w.feat)
    _check_range(all(x >= 0 for x in ws) and any(x > 0 for x in ws), "distill.weights", "nonnegative with one positive")
    d = cfg.distill
    _check_range(d.lr >= 0, "distill.lr", "must be >= 0")
    for key in ("teacher_steps", "stage1_steps", "stage2_steps", "eval_every", "freeze_check_every"):
        _check_range(getattr(d, key) >= 0, f"distill.{key}", "must be >= 0")
    _check_range(0 <= d.cond_dropout <= 1, "distill.cond_dropout", "must be in [0, 1]")
    _check_range(d.eval_size >= 1, "distill.eval_size", "must be >= 1")
    _check_range(cfg.data.batch >= 1, "data.batch", "must be >= 1")
    _check_range(cfg.data.batch <= cfg.data.size, "data.batch", "exceeds data.size")


def parse(doc: dict) -> RunConfig:
    cfg = _build(RunConfig, doc, "")
    validate(cfg)
    return cfg


def to_dict(cfg: RunConfig) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def dumps(cfg: RunConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n"


def loads(text: str) -> RunConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    return parse(doc)


def load(path) -> RunConfig:
    return loads(Path(path).read_text())
