"""Run configuration: line-oriented ``section.key = value`` files with strict keys.

A ``[section]`` header line prefixes the bare keys that follow it. ``#``
starts a comment. Lists are comma-separated; ``none`` clears an optional.
"""

from __future__ import annotations

import typing
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from snrjscc.model import ModelConfig
from snrjscc.training import TrainSchedule


class ConfigError(ValueError):
    pass


@dataclass
class DataSettings:
    dataset: str = "cifar10"  # cifar10 | patches
    cache_dir: str = ""  # empty: $JSCC_DATA_DIR or ~/.cache/snrjscc
    train_subset: int = 0  # 0: whole split
    test_subset: int = 0


@dataclass
class EvalSettings:
    snrs: list[float] = field(default_factory=lambda: [0.0, 5.0, 10.0, 15.0, 20.0])
    est_noise_var: float = 0.0
    pilot_mode: str = "noisy_oracle"
    pilot_length: int = 64
    user_snrs: list[float] = field(default_factory=lambda: [0.0, 10.0, 20.0])
    noise_realizations: int = 1
    batch_size: int = 256
    model_id: str = ""
    plot: bool = False


@dataclass
class PathSettings:
    out_dir: str = "runs/default"
    checkpoint: str = ""  # empty: <out_dir>/best.ckpt
    report: str = ""  # empty: <out_dir>/<subcommand>.tsv


# model.seed and schedule.seed are driven by the global seed
_SEEDED = {("model", "seed"), ("schedule", "seed")}


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    data: DataSettings = field(default_factory=DataSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)
    paths: PathSettings = field(default_factory=PathSettings)

    def __post_init__(self) -> None:
        self.model.seed = self.seed
        self.schedule.seed = self.seed

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.paths.checkpoint) if self.paths.checkpoint else Path(self.paths.out_dir) / "best.ckpt"

    def to_text(self) -> str:
        lines = [f"seed = {self.seed}"]
        for section in SECTIONS:
            obj = getattr(self, section)
            for f in fields(obj):
                if (section, f.name) in _SEEDED:
                    continue
                lines.append(f"{section}.{f.name} = {_format(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"


SECTIONS = ("model", "schedule", "data", "eval", "paths")
_SECTION_TYPES = {
    "model": ModelConfig,
    "schedule": TrainSchedule,
    "data": DataSettings,
    "eval": EvalSettings,
    "paths": PathSettings,
}


def all_keys() -> list[tuple[str, Any, Any]]:
    """``(dotted_key, type, default)`` for every accepted key."""
    out: list[tuple[str, Any, Any]] = [("seed", int, 0)]
    for section, cls in _SECTION_TYPES.items():
        hints = typing.get_type_hints(cls)
        default = cls()
        for f in fields(cls):
            if (section, f.name) not in _SEEDED:
                out.append((f"{section}.{f.name}", hints[f.name], getattr(default, f.name)))
    return out


def _format(v: Any) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ", ".join(_format(x) for x in v)
    return str(v)


def _coerce(text: str, tp: Any, key: str) -> Any:
    text = text.strip()
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    try:
        if origin is typing.Union or (origin is not None and type(None) in args):
            inner = [a for a in args if a is not type(None)][0]
            return None if text.lower() in ("none", "null", "") else _coerce(text, inner, key)
        if origin in (list, tuple):
            items = [s for s in (p.strip() for p in text.split(",")) if s]
            vals = [_coerce(s, args[0], key) for s in items]
            return tuple(vals) if origin is tuple else vals
        if tp is bool:
            low = text.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(text)
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        return text
    except (ValueError, IndexError) as e:
        raise ConfigError(f"{key}: cannot read {text!r} as {tp}") from e


def _resolve_key(key: str) -> tuple[str | None, str]:
    known = {k: tp for k, tp, _ in all_keys()}
    if key in known:
        return (None, key) if "." not in key else tuple(key.split(".", 1))  # type: ignore[return-value]
    matches = [k for k in known if k.split(".")[-1] == key]
    if len(matches) == 1:
        return tuple(matches[0].split(".", 1))  # type: ignore[return-value]
    if len(matches) > 1:
        raise ConfigError(f"ambiguous key {key!r}: could be {matches}")
    raise ConfigError(f"unknown config key {key!r}")


def parse_assignments(pairs: list[tuple[str, str]]) -> RunConfig:
    """Build a RunConfig from ``(key, value)`` pairs, later pairs winning."""
    hints = {k: tp for k, tp, _ in all_keys()}
    values: dict[str, dict[str, Any]] = {s: {} for s in SECTIONS}
    seed = 0
    for key, raw in pairs:
        section, name = _resolve_key(key)
        dotted = name if section is None else f"{section}.{name}"
        val = _coerce(raw, hints[dotted], dotted)
        if section is None:
            seed = val
        else:
            values[section][name] = val
    try:
        kwargs = {s: _SECTION_TYPES[s](**values[s]) for s in SECTIONS}
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    return RunConfig(seed=seed, **kwargs)


def read_pairs(text: str, source: str = "<config>") -> list[tuple[str, str]]:
    pairs = []
    prefix = ""
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            prefix = line[1:-1].strip()
            if prefix and prefix not in SECTIONS:
                raise ConfigError(f"{source}:{lineno}: unknown section [{prefix}]")
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if prefix and "." not in key:
            key = f"{prefix}.{key}"
        pairs.append((key, val))
    return pairs


def split_override(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise ConfigError(f"override must look like key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    pairs: list[tuple[str, str]] = []
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} not found")
        pairs += read_pairs(p.read_text(), str(p))
    pairs += [split_override(o) for o in overrides or []]
    return parse_assignments(pairs)
