"""Experiment configuration: strict YAML schema, dotted overrides, round-trip serialization."""
from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import yaml

from .errors import ConfigError
from .experiments import StudySpec
from .objectives import ClipConfig
from .policy import MoEConfig, PolicyConfig
from .tasks import TaskSpec
from .trainer import TrainConfig

ENV_PREFIX = "SEQPO__"


@dataclass(frozen=True)
class ExperimentConfig:
    policy: PolicyConfig = PolicyConfig()
    task: TaskSpec = TaskSpec()
    train: TrainConfig = TrainConfig()
    study: Optional[StudySpec] = None
    output_dir: str = "runs/latest"

    def __post_init__(self):
        self.task.check_policy(self.policy.vocab_size, self.policy.context_window)
        if self.study is not None and self.study.study == "moe_stability" and not self.policy.is_moe:
            raise ConfigError("study moe_stability needs policy.arch = moe")


_NESTED = (ExperimentConfig, PolicyConfig, MoEConfig, TaskSpec, TrainConfig, ClipConfig, StudySpec)


def _unwrap_optional(tp):
    if typing.get_origin(tp) is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if len(args) == 1:
            return args[0], True
    return tp, False


def _coerce(value, tp, path: str):
    tp, optional = _unwrap_optional(tp)
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{path} must not be null")
    if tp in _NESTED:
        return build(tp, value, path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path} must be a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path} must be an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} must be a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path} must be a string, got {value!r}")
        return value
    if tp is tuple or typing.get_origin(tp) is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path} must be a list, got {value!r}")
        return tuple(value)
    if tp is dict or typing.get_origin(tp) is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{path} must be a mapping, got {value!r}")
        return value
    return value


def build(cls, data, path: str = ""):
    """Construct dataclass ``cls`` from a mapping, rejecting unknown keys."""
    if isinstance(data, cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown config key(s): {', '.join(where + k for k in unknown)}")
    kwargs = {}
    for key, value in data.items():
        kwargs[key] = _coerce(value, hints[key], f"{path}.{key}" if path else key)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def to_dict(cfg) -> dict:
    def plain(v):
        if isinstance(v, dict):
            return {k: plain(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [plain(x) for x in v]
        return v

    return plain(dataclasses.asdict(cfg))


def set_dotted(data: dict, key: str, value):
    parts = key.split(".")
    node = data
    for part in parts[:-1]:
        if node.get(part) is None:
            node[part] = {}
        node = node[part]
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r}: {part!r} is not a section")
    node[parts[-1]] = value


def parse_override(text: str):
    if "=" not in text:
        raise ConfigError(f"override must look like key=value, got {text!r}")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw) if raw.strip() else ""


def env_overrides(environ=None) -> list:
    """``SEQPO__TRAIN__ALGORITHM=grpo`` becomes the override ``train.algorithm=grpo``."""
    environ = os.environ if environ is None else environ
    out = []
    for name in sorted(environ):
        if name.startswith(ENV_PREFIX):
            key = ".".join(p.lower() for p in name[len(ENV_PREFIX):].split("__"))
            out.append(f"{key}={environ[name]}")
    return out


def load_config(path, overrides=(), environ=None) -> ExperimentConfig:
    """Read YAML, then apply env-var overrides, then explicit overrides (highest precedence)."""
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    for item in [*env_overrides(environ), *overrides]:
        key, value = parse_override(item)
        set_dotted(data, key, value)
    return build(ExperimentConfig, data)


def dump_config(cfg: ExperimentConfig, path):
    Path(path).write_text(yaml.safe_dump(to_dict(cfg), sort_keys=False))
