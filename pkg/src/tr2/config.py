"""Run configuration and its ``key = value`` file format.

Dotted keys address nested sections (``fusion.heads = 8``); tuples are comma
separated; ``none`` clears an optional value. Unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .fusion import FusionConfig
from .losses import OptimConfig
from .metrics import EvalConfig
from .model import Ablation
from .synth import GenConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    gen: GenConfig = field(default_factory=GenConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: Ablation = field(default_factory=Ablation)
    epochs: int = 50
    batch_size: int = 10
    # return the parameters of the epoch with the best validation R@K (first K)
    # instead of the last epoch; needs validation videos and eval_every
    select_best: bool = False
    seed: int = 0
    task: str = "predcls"
    split: tuple[float, ...] = (0.8, 0.1, 0.1)
    split_seed: int = 0
    provider: str = "stub"
    text_dim: int = 512
    embedding_table: str = ""
    template: str = "a photo of a {subject} {predicate} a {object}"

    def __post_init__(self):
        self.task = self.task.lower()
        self.split = tuple(float(x) for x in self.split)
        if self.task not in ("predcls", "sgcls", "sgdet"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.provider not in ("stub", "file"):
            raise ConfigError(f"provider must be 'stub' or 'file', got {self.provider!r}")
        if self.provider == "file" and not self.embedding_table:
            raise ConfigError("provider 'file' needs embedding_table")
        if self.epochs < 0 or self.batch_size <= 0:
            raise ConfigError("epochs must be >= 0 and batch_size > 0")
        self.eval.task = self.task

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


SECTIONS = ("gen", "fusion", "optim", "eval", "ablation")


def _coerce(raw: str, tp, key: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        inner = [a for a in args if a is not type(None)]
        if raw.lower() == "none":
            return None
        return _coerce(raw, inner[0], key)
    if origin is tuple:
        inner = args[0]
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        return tuple(_coerce(p, inner, key) for p in parts)
    try:
        if tp is bool:
            low = raw.lower()
            if low in ("true", "on", "yes", "1"):
                return True
            if low in ("false", "off", "no", "0"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is str:
            return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(tp, '__name__', tp)}") from None
    raise ConfigError(f"{key}: unsupported type {tp}")


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def parse_config(text: str) -> RunConfig:
    top: dict[str, object] = {}
    nested: dict[str, dict[str, object]] = {s: {} for s in SECTIONS}
    run_hints = _hints(RunConfig)
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (x.strip() for x in body.split("=", 1))
        if "." in key:
            section, name = key.split(".", 1)
            if section not in SECTIONS:
                raise ConfigError(f"line {lineno}: unknown section {section!r}")
            cls = run_hints[section]
            hints = _hints(cls)
            if name not in hints:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            nested[section][name] = _coerce(raw, hints[name], key)
        else:
            if key not in run_hints or key in SECTIONS:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            top[key] = _coerce(raw, run_hints[key], key)
    try:
        sections = {s: run_hints[s](**nested[s]) for s in SECTIONS}
        return RunConfig(**sections, **top)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def _render(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_render(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_config(cfg: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if f.name in SECTIONS:
            for g in dataclasses.fields(value):
                lines.append(f"{f.name}.{g.name} = {_render(getattr(value, g.name))}")
        else:
            lines.append(f"{f.name} = {_render(value)}")
    return "\n".join(lines) + "\n"
