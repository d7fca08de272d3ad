"""Run configuration files: JSON with optional sections arch / adapter / train / task / pretrain.

Every field has a default, so ``{}`` is a valid toy-small LoRA run.  Unknown keys
and ill-typed values are rejected with the offending ``section.field`` path.
"""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .peft.spec import AdapterSpec, AdapterSpecError
from .trainer.loop import PRETRAIN_DEFAULTS, TrainConfig
from .trainer.tasks import TaskSpec
from .transformer import PRESETS, ArchError, ArchSpec

SECTIONS = ("arch", "adapter", "train", "task", "pretrain")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PretrainConfig:
    train: TrainConfig = PRETRAIN_DEFAULTS
    init_std: float | None = None  # None: d_model ** -0.5

    def to_dict(self) -> dict:
        return {**self.train.to_dict(), "init_std": self.init_std}


@dataclass(frozen=True)
class RunConfig:
    arch: ArchSpec = field(default_factory=lambda: PRESETS["toy-small"])
    adapter: AdapterSpec = field(default_factory=AdapterSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    task: TaskSpec = field(default_factory=TaskSpec)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)

    def to_dict(self) -> dict:
        return {
            "arch": self.arch.to_dict(),
            "adapter": self.adapter.to_dict(),
            "train": self.train.to_dict(),
            "task": self.task.to_dict(),
            "pretrain": self.pretrain.to_dict(),
        }


def _check_type(path: str, value, hint) -> object:
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        for option in typing.get_args(hint):
            try:
                return _check_type(path, value, option)
            except ConfigError:
                continue
        raise ConfigError(f"{path}: {value!r} does not match {hint}")
    if hint is type(None):
        if value is not None:
            raise ConfigError(f"{path}: expected null, got {value!r}")
        return None
    if origin is tuple:
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise ConfigError(f"{path}: expected a list of strings, got {value!r}")
        return tuple(value)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported field type {hint}")


def _build(cls, section: str, data, base=None, extra: tuple[str, ...] = ()):
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names - set(extra))
    if unknown:
        raise ConfigError(f"{section}.{unknown[0]}: unknown key (valid: {', '.join(sorted(names | set(extra)))})")
    values = {k: _check_type(f"{section}.{k}", v, hints[k]) for k, v in data.items() if k not in extra}
    return dataclasses.replace(base, **values) if base is not None else cls(**values)


def _arch(data) -> ArchSpec:
    if isinstance(data, str):
        data = {"preset": data}
    if not isinstance(data, dict):
        raise ConfigError("arch: expected a preset name or an object")
    preset = data.get("preset", "toy-small")
    if preset not in PRESETS:
        raise ConfigError(f"arch.preset: unknown preset {preset!r} (valid: {', '.join(PRESETS)})")
    arch = _build(ArchSpec, "arch", data, PRESETS[preset], extra=("preset",))
    problems = arch.violations()
    if problems:
        raise ConfigError(f"arch: {problems[0]}")
    return arch


def parse_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("top level: expected a JSON object")
    unknown = sorted(set(doc) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown section (valid: {', '.join(SECTIONS)})")
    arch = _arch(doc.get("arch", {}))
    adapter = _build(AdapterSpec, "adapter", doc.get("adapter", {}))
    train = _build(TrainConfig, "train", doc.get("train", {}))
    task = _build(TaskSpec, "task", doc.get("task", {}))
    pre = doc.get("pretrain", {})
    pre_train = _build(TrainConfig, "pretrain", pre, PRETRAIN_DEFAULTS, extra=("init_std",))
    init_std = _check_type("pretrain.init_std", pre.get("init_std"), float | None)
    if init_std is not None and init_std <= 0:
        raise ConfigError("pretrain.init_std: must be > 0")
    for section, obj in (("adapter", adapter), ("train", train), ("task", task), ("pretrain", pre_train)):
        try:
            obj.validate(arch) if section == "adapter" else obj.validate()
        except (AdapterSpecError, ArchError, ValueError) as exc:
            raise ConfigError(f"{section}: {exc}") from None
    if task.vocab + 3 > arch.vocab_size:
        raise ConfigError(f"task.vocab: {task.vocab} payload tokens + 3 specials exceed arch vocab {arch.vocab_size}")
    if task.max_len + 1 > min(arch.max_src_len, arch.max_tgt_len):
        raise ConfigError(f"task.max_len: {task.max_len} does not fit the arch sequence limits")
    return RunConfig(arch, adapter, train, task, PretrainConfig(pre_train, init_std))


def loads_config(text: str) -> RunConfig:
    try:
        doc = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return parse_config(doc)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return loads_config(text)
