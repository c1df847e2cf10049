"""Run configuration: dataclasses, YAML loading, resolved-config echo.

Precedence is defaults < config file < explicit overrides.  Unknown keys
are rejected so typos fail fast, and every run directory receives a
``config.resolved`` echo of the values actually used.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

__all__ = [
    "ConfigError",
    "GANTrainConfig",
    "SynthesisConfig",
    "RecTrainConfig",
    "load_config_file",
    "build_config",
    "write_resolved",
]


class ConfigError(ValueError):
    pass


# The YAML surface spells the task-loss weight "lambda"; that is a reserved
# word in Python, so the dataclass field is "lam".
_KEY_ALIASES = {"lambda": "lam"}

NORMALIZE_MODES = ("height-128", "symbol-height")


@dataclass
class GANTrainConfig:
    """Joint GAN + task-model training."""

    lr_d: float = 2e-4
    lr_g: float = 5e-5
    beta1: float = 0.0
    beta2: float = 0.9
    lam: float = 1.0
    bidirectional: bool = True  # False: generator sees rendered sources only
    swap_target: bool = False  # target domain drawn at random (may equal source)
    max_iterations: int = 1000
    batch_size: int = 4
    input_height: int = 128
    max_width: int = 512
    max_tokens: int = 50
    seed: int = 0
    gan_preset: str = "default"  # or "tiny"
    task_preset: str = "small"  # or "tiny" / "large"
    spectral_norm: bool = True
    augment_rendered: bool = True
    augment_handwritten: bool = True
    checkpoint_iterations: list[int] = field(default_factory=list)
    log_every: int = 25

    def __post_init__(self):
        if self.lr_d <= 0 or self.lr_g <= 0:
            raise ConfigError("learning rates must be positive")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if min(self.max_iterations, self.batch_size, self.input_height, self.max_width, self.max_tokens) <= 0:
            raise ConfigError("iteration/size thresholds must be positive")
        if self.input_height % 16:
            raise ConfigError("input_height must be divisible by 16 (four halvings)")


@dataclass
class SynthesisConfig:
    """Bulk generation of handwritten-style images from a trained generator."""

    max_pixel_area: int = 640_000
    sample_render_params: bool = True
    input_height: int = 128
    seed: int = 0
    font: str = "mathrm"
    font_size: int = 32

    def __post_init__(self):
        if self.max_pixel_area <= 0:
            raise ConfigError("max_pixel_area must be positive")


@dataclass
class RecTrainConfig:
    """Standalone recognizer training."""

    batch_size: int = 6
    momentum: float = 0.9
    lr: float = 1e-4
    lr_decay_factor: float = 10.0
    plateau_patience: int = 3
    normalize_mode: str = "height-128"
    symbol_font_size: int = 32  # reference size for symbol-height normalization
    epochs: int = 10
    steps_per_epoch: int = 100
    max_tokens: int = 50
    max_width: int = 512
    seed: int = 0
    model_preset: str = "small"  # or "tiny" / "large"
    eval_beam_size: int = 1
    augment: bool = True

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.normalize_mode not in NORMALIZE_MODES:
            raise ConfigError(f"normalize_mode must be one of {NORMALIZE_MODES}")
        if self.lr <= 0 or self.lr_decay_factor <= 1:
            raise ConfigError("lr must be positive and lr_decay_factor > 1")


def load_config_file(path: str | Path) -> dict:
    raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    return raw


def build_config(cls, file_values: dict | None = None, overrides: dict | None = None):
    """Merge defaults, file values, and overrides into a config instance."""
    known = {f.name for f in fields(cls)}
    merged: dict = {}
    for source in (file_values or {}), (overrides or {}):
        for key, value in source.items():
            key = _KEY_ALIASES.get(key, key)
            if key not in known:
                raise ConfigError(f"unknown config key {key!r} for {cls.__name__}")
            if value is not None:
                merged[key] = value
    return cls(**merged)


def write_resolved(cfg, out_dir: str | Path, name: str = "config.resolved") -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = dataclasses.asdict(cfg)
    path = out_dir / name
    path.write_text(yaml.safe_dump(payload, sort_keys=True), encoding="utf-8")
    return path
