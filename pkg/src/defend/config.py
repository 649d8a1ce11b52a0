"""Run configuration: presets, JSON files with flat dotted keys, --set overrides."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

from .decoder import DecoderConfig
from .encoders import EncoderConfig
from .fem import FemConfig
from .patching import SamplerConfig
from .trainer import TrainConfig

SEED_ENV = "DEFEND_SEED"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataSettings:
    classes: int = 8
    per_class: int = 60
    image_size: int = 64
    dir: str = "data"


@dataclass(frozen=True)
class EvalSettings:
    probe_epochs: int = 300
    vqa_steps: int = 150
    zeroshot_images: int = 0   # 0 = every zero-shot image


SECTIONS = {
    "encoder": EncoderConfig,
    "fem": FemConfig,
    "sampler": SamplerConfig,
    "train": TrainConfig,
    "decoder": DecoderConfig,
    "data": DataSettings,
    "eval": EvalSettings,
}


@dataclass(frozen=True)
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    fem: FemConfig = field(default_factory=FemConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    data: DataSettings = field(default_factory=DataSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)

    @property
    def seed(self) -> int:
        return self.train.seed

    def to_flat(self) -> dict[str, Any]:
        out = {}
        for section in SECTIONS:
            obj = getattr(self, section)
            for f in fields(obj):
                value = getattr(obj, f.name)
                out[f"{section}.{f.name}"] = list(value) if isinstance(value, tuple) else value
        return out

    @classmethod
    def from_flat(cls, flat: dict[str, Any], base: Optional["RunConfig"] = None) -> "RunConfig":
        base = base or cls()
        grouped: dict[str, dict] = {}
        for key, value in flat.items():
            section, _, name = key.partition(".")
            if section not in SECTIONS or not name:
                raise ConfigError(f"unknown config key {key!r}")
            names = {f.name: f for f in fields(SECTIONS[section])}
            if name not in names:
                raise ConfigError(f"unknown config key {key!r}")
            grouped.setdefault(section, {})[name] = _coerce(key, value, getattr(getattr(base, section), name))
        try:
            return replace(base, **{s: replace(getattr(base, s), **kv) for s, kv in grouped.items()})
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def _coerce(key: str, value: Any, current: Any) -> Any:
    """Convert ``value`` (possibly a string from the command line) to the type of ``current``."""
    try:
        if isinstance(current, bool):
            if isinstance(value, str):
                if value.lower() in ("1", "true", "yes", "on"):
                    return True
                if value.lower() in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            return bool(value)
        if isinstance(current, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(current, float):
            return float(value)
        if isinstance(current, tuple):
            if isinstance(value, str):
                value = json.loads(value)
            return tuple(float(v) for v in value)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc


PRESETS: dict[str, dict[str, Any]] = {
    "desk-smoke": {
        "train.warmup_epochs": 1, "train.main_epochs": 2, "train.finetune_epochs": 1,
    },
    "desk-full": {
        "train.warmup_epochs": 2, "train.main_epochs": 20, "train.finetune_epochs": 8,
    },
}


def parse_set(items) -> dict[str, str]:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def resolve(preset: Optional[str] = None, config_file=None, overrides: Optional[dict] = None,
            seed: Optional[int] = None) -> RunConfig:
    """Defaults <- preset <- config file <- --set overrides <- explicit seed (or DEFEND_SEED)."""
    cfg = RunConfig()
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r} (choose from {', '.join(PRESETS)})")
        cfg = RunConfig.from_flat(PRESETS[preset], cfg)
    if config_file is not None:
        try:
            with open(config_file, encoding="utf-8") as fh:
                flat = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {config_file}: {exc}") from exc
        if not isinstance(flat, dict):
            raise ConfigError("config file must hold a JSON object of dotted keys")
        cfg = RunConfig.from_flat(flat, cfg)
    if overrides:
        cfg = RunConfig.from_flat(overrides, cfg)
    if seed is None and os.environ.get(SEED_ENV):
        seed = _coerce(SEED_ENV, os.environ[SEED_ENV], 0)
    if seed is not None:
        cfg = RunConfig.from_flat({"train.seed": seed}, cfg)
    return cfg


def write_resolved(cfg: RunConfig, out_dir, extra: Optional[dict] = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = cfg.to_flat()
    if extra:
        payload.update(extra)
    path = out / "resolved_config.json"
    path.write_text(json.dumps(payload, indent=1, sort_keys=True), encoding="utf-8")
    return path
