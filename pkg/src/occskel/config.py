"""Flat ``key = value`` configuration files shared by every pipeline stage."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields, replace

from .errors import ConfigError
from .skeletor import ContractionConfig
from .trainer import TrainingConfig

log = logging.getLogger(__name__)


@dataclass
class SurfaceConfig:
    resolution: int = 128
    iso: str = "median"
    bounds_inflation: float = 0.05
    surface_samples: int = 20000
    projection_steps: int = 10
    projection_damping: float = 0.8


@dataclass
class EvalConfig:
    eval_samples: int = 100000
    scale_factor: float = 100.0


SECTIONS = {
    "training": TrainingConfig,
    "contraction": ContractionConfig,
    "surface": SurfaceConfig,
    "evaluation": EvalConfig,
}


def _owner(key):
    for name, cls in SECTIONS.items():
        if key in {f.name for f in fields(cls)}:
            return name
    return None


def parse_key_values(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _coerce(key, text, default):
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            if key == "skip_layer" and text.lower() == "none":
                return 0
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {text!r}") from None


@dataclass
class PipelineConfig:
    training: TrainingConfig = field(default_factory=TrainingConfig)
    contraction: ContractionConfig = field(default_factory=ContractionConfig)
    surface: SurfaceConfig = field(default_factory=SurfaceConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    present: frozenset = frozenset()

    @property
    def seed(self):
        return self.training.seed

    @classmethod
    def from_mapping(cls, values: dict) -> "PipelineConfig":
        unknown = sorted(k for k in values if _owner(k) is None)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        parts = {}
        for name, sec in SECTIONS.items():
            base = sec()
            upd = {f.name: _coerce(f.name, values[f.name], getattr(base, f.name))
                   for f in fields(sec) if f.name in values}
            parts[name] = replace(base, **upd)
        return cls(**parts, present=frozenset(values))

    @classmethod
    def from_text(cls, text: str) -> "PipelineConfig":
        return cls.from_mapping(parse_key_values(text))

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text)

    def missing(self, section: str):
        return [f.name for f in fields(SECTIONS[section]) if f.name not in self.present]

    def warn_missing(self, section: str):
        """Log one warning per key of ``section`` that fell back to its default."""
        obj = getattr(self, section)
        for key in self.missing(section):
            log.warning("config key %r not set; using default %r", key, getattr(obj, key))

    def to_text(self) -> str:
        lines = []
        for name in SECTIONS:
            lines.append(f"# {name}")
            obj = getattr(self, name)
            lines.extend(f"{f.name} = {getattr(obj, f.name)}" for f in fields(obj))
        return "\n".join(lines) + "\n"
