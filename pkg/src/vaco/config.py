"""Experiment configuration: one JSON file, every field defaulted."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from vaco.decoder import DecoderConfig
from vaco.flops import DEFAULT_TEXT_LEN, FlopsDims
from vaco.model import STRATEGIES, ModelConfig, TaskConfig
from vaco.teachers import ImageConfig
from vaco.training import StageConfig


class ConfigError(ValueError):
    """Bad configuration; the message names the offending line or field."""


@dataclass(frozen=True)
class TeacherConfig:
    world_seed: int = 0
    gain: float = 3.0
    hidden: int = 32


@dataclass(frozen=True)
class DataConfig:
    train: int = 2000
    heldout: int = 500
    task_link: str = "depth"


@dataclass(frozen=True)
class ValSection:
    layers: int = 3
    heads: int = 2


@dataclass(frozen=True)
class SweepConfig:
    kind: str = "strategy"  # "strategy" or "queries"
    strategies: tuple[str, ...] = STRATEGIES
    queries: tuple[int, ...] = (1, 4, 8, 16)

    def __post_init__(self):
        if self.kind not in ("strategy", "queries"):
            raise ValueError(f"sweep kind must be 'strategy' or 'queries', got {self.kind!r}")
        bad = [s for s in self.strategies if s not in STRATEGIES]
        if bad:
            raise ValueError(f"unknown strategies {bad}")


@dataclass(frozen=True)
class MaskLayoutConfig:
    """Explicit layout for ``dump-mask``; overrides the one implied by the model."""

    vision: int
    groups: tuple[int, ...] = ()
    text: int = 0


def _default_tasks() -> tuple[TaskConfig, ...]:
    return (
        TaskConfig("depth", queries=4, tokens=16, dim=24, seed=11),
        TaskConfig("semantic", queries=4, tokens=36, dim=16, seed=12),
    )


@dataclass(frozen=True)
class RunConfig:
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    image: ImageConfig = field(default_factory=ImageConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    tasks: tuple[TaskConfig, ...] = field(default_factory=_default_tasks)
    strategy: str = "query_dis"
    intra_group: str = "causal"
    val: ValSection = field(default_factory=ValSection)
    lam: float = 0.1
    sim_mode: str = "pooled"
    embed_std: float = 0.1
    data: DataConfig = field(default_factory=DataConfig)
    pt: StageConfig = field(default_factory=lambda: StageConfig("PT", epochs=1, batch_size=32, lr=2e-3))
    sft: StageConfig = field(default_factory=lambda: StageConfig("SFT", epochs=3, batch_size=16, lr=1e-3))
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    mask_layout: MaskLayoutConfig | None = None
    output_dir: str = "runs/default"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if not self.seeds:
            raise ValueError("seeds must not be empty")
        if self.pt.stage != "PT" or self.sft.stage != "SFT":
            raise ValueError("pt/sft sections must carry stage 'PT'/'SFT'")
        names = [t.name for t in self.tasks]
        if self.tasks and self.data.task_link not in names:
            raise ValueError(f"data.task_link {self.data.task_link!r} is not one of the tasks {names}")

    def model_config(self, strategy: str | None = None, queries: int | None = None) -> ModelConfig:
        tasks = self.tasks
        if queries is not None:
            tasks = tuple(dataclasses.replace(t, queries=queries) for t in tasks)
        return ModelConfig(
            decoder=self.decoder, image=self.image, tasks=tasks, strategy=strategy or self.strategy,
            intra_group=self.intra_group, val_layers=self.val.layers, val_heads=self.val.heads,
            lam=self.lam, sim_mode=self.sim_mode, embed_std=self.embed_std,
        )

    def to_dict(self) -> dict:
        return _to_jsonable(self)

    def config_hash(self) -> str:
        return config_hash(self)


@dataclass(frozen=True)
class FlopsConfig:
    dims: FlopsDims = field(default_factory=FlopsDims)
    tasks: int = 4
    queries: tuple[int, ...] = (0, 1, 4, 8, 16)
    vision_tokens: int = 576
    text_tokens: int = DEFAULT_TEXT_LEN
    output_dir: str = "runs/flops"

    def config_hash(self) -> str:
        return config_hash(self)


def config_hash(cfg: Any) -> str:
    """sha256 prefix of the canonical JSON of ``cfg``, ignoring ``output_dir``."""
    content = _to_jsonable(cfg)
    content.pop("output_dir", None)
    canon = json.dumps(content, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


# ---------------------------------------------------------------- parsing


def _to_jsonable(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    return obj


def _convert(tp: Any, value: Any, path: str) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(inner[0], value, path)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    if origin in (tuple, list):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        item = args[0] if args else Any
        items = [_convert(item, v, f"{path}[{i}]") for i, v in enumerate(value)]
        return tuple(items) if origin is tuple else items
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
    return value


def _build(cls: type, data: Any, path: str) -> Any:
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{path or '<root>'}: unknown field(s) {unknown}; allowed: {sorted(known)}")
    kwargs = {k: _convert(hints[k], v, f"{path}.{k}" if path else k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path or '<root>'}: {exc}") from exc


def parse_config(text: str, cls: type = RunConfig, source: str = "<config>") -> Any:
    try:
        data = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return _build(cls, data, "")


def load_config(path: str | Path, cls: type = RunConfig) -> Any:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc
    return parse_config(text, cls, str(path))


def dump_config(cfg: Any) -> str:
    return json.dumps(_to_jsonable(cfg), indent=2, sort_keys=True) + "\n"
