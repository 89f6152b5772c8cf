"""Run configuration: nested dataclasses built from layered YAML/JSON files
plus ``key=value`` overrides."""
from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Tuple

import yaml

from .backbone import InvalidInputError
from .decoder import DecoderConfig


@dataclass
class OptimizerConfig:
    name: str = "adamw"
    lr: float = 3e-6
    weight_decay: float = 5e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8


@dataclass
class LossConfig:
    seg: str = "wbce_wiou"


@dataclass
class BackboneConfig:
    kind: str = "stub"
    seed: int = 1337


@dataclass
class DataConfig:
    manifest: Optional[str] = None
    split: Optional[str] = None
    train_split: str = "seen"
    eval_split: str = "unseen"
    # "split": classify among the eval split's classes; "all": among every class.
    eval_classes: str = "split"
    augment: bool = True
    flip_p: float = 0.5
    max_rotation: float = 15.0
    jitter: float = 0.2


@dataclass
class PromptConfig:
    templates: str = "camo"
    eval_templates: Optional[str] = None


@dataclass
class RunConfig:
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch_size: int = 4
    epochs: int = 30
    resolution: int = 384
    seed: int = 0
    decoder: DecoderConfig = field(default_factory=lambda: DecoderConfig(width=128, heads=8))
    loss: LossConfig = field(default_factory=LossConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    data: DataConfig = field(default_factory=DataConfig)
    prompts: PromptConfig = field(default_factory=PromptConfig)
    output_dir: str = "runs/default"
    max_steps: Optional[int] = None

    def __post_init__(self):
        for name in ("batch_size", "epochs", "resolution"):
            if getattr(self, name) <= 0:
                raise InvalidInputError(f"{name} must be positive")
        if self.optimizer.lr <= 0 or self.optimizer.weight_decay < 0:
            raise InvalidInputError("optimizer lr must be positive and weight decay non-negative")

    def to_dict(self) -> dict:
        return _to_plain(self)

    def replace(self, **changes) -> "RunConfig":
        d = self.to_dict()
        for key, value in changes.items():
            set_path(d, key, value)
        return config_from_dict(d)


def _to_plain(obj):
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    return obj


def _build(cls, data: dict, path: str = ""):
    if not isinstance(data, dict):
        raise InvalidInputError(f"config section {path or '<root>'} must be a mapping")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise InvalidInputError(f"unknown config keys under {path or '<root>'}: {unknown}")
    kwargs = {}
    for key, value in data.items():
        f = names[key]
        sub = _NESTED.get((cls, key))
        if sub is not None:
            kwargs[key] = _build(sub, value, f"{path}.{key}".lstrip("."))
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = _coerce(value, f, f"{path}.{key}".lstrip("."))
    return cls(**kwargs)


def _coerce(value, f: dataclasses.Field, where: str):
    """YAML 1.1 reads ``1e-3`` as a string; convert it for numeric fields."""
    default = f.default if f.default is not dataclasses.MISSING else None
    if isinstance(default, bool) or not isinstance(default, (int, float)):
        return value
    if isinstance(value, str):
        try:
            value = float(value) if isinstance(default, float) else int(value)
        except ValueError:
            raise InvalidInputError(f"{where} must be a number, got {value!r}") from None
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    return value


_NESTED = {
    (RunConfig, "optimizer"): OptimizerConfig,
    (RunConfig, "decoder"): DecoderConfig,
    (RunConfig, "loss"): LossConfig,
    (RunConfig, "backbone"): BackboneConfig,
    (RunConfig, "data"): DataConfig,
    (RunConfig, "prompts"): PromptConfig,
}


def config_from_dict(data: dict) -> RunConfig:
    merged = deep_merge(RunConfig().to_dict(), _to_plain(data))
    return _build(RunConfig, merged)


def deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def set_path(d: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = d
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = value


def parse_override(item: str) -> Tuple[str, Any]:
    if "=" not in item:
        raise InvalidInputError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def load_config(paths: Iterable[str] = (), overrides: Iterable[str] = ()) -> RunConfig:
    """Merge config files left to right, then apply ``key=value`` overrides."""
    data: Dict[str, Any] = {}
    for p in paths:
        text = Path(p).read_text()
        layer = yaml.safe_load(text) or {}
        data = deep_merge(data, layer)
    for item in overrides:
        key, value = parse_override(item)
        set_path(data, key, value)
    return config_from_dict(data)


def dump_config(config: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))


def config_diff(a: dict, b: dict, prefix: str = "") -> Dict[str, Tuple[Any, Any]]:
    out = {}
    for k in sorted(set(a) | set(b)):
        va, vb = a.get(k), b.get(k)
        key = f"{prefix}{k}"
        if isinstance(va, dict) and isinstance(vb, dict):
            out.update(config_diff(va, vb, key + "."))
        elif json.dumps(va) != json.dumps(vb):
            out[key] = (va, vb)
    return out
