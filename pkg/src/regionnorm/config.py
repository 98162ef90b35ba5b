"""Flat key=value experiment configuration with typed parsing."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .inpaintnet import ARCHITECTURES

MASK_MODES = ("regular", "irregular", "external_dir")


def _parse_intervals(text: str) -> list:
    """Comma-separated "lo-hi" pairs, e.g. "0.1-0.2,0.3-0.4"."""
    intervals = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        pieces = part.split("-")
        if len(pieces) != 2:
            raise ConfigError(f"bad interval {part!r}; expected lo-hi")
        try:
            lo, hi = float(pieces[0]), float(pieces[1])
        except ValueError as exc:
            raise ConfigError(f"bad interval {part!r}: {exc}") from exc
        if not (0.0 <= lo < hi <= 0.6):
            raise ConfigError(f"interval {part!r} must satisfy 0 <= lo < hi <= 0.6")
        intervals.append((lo, hi))
    if not intervals:
        raise ConfigError("empty interval list")
    return intervals


def format_intervals(intervals) -> str:
    return ",".join(f"{lo:g}-{hi:g}" for lo, hi in intervals)


@dataclass
class ExperimentConfig:
    """Everything a training or evaluation run needs, seed included."""

    dataset_dir: str = ""
    output_dir: str = ""
    mask_mode: str = "irregular"
    mask_dir: str = ""
    mask_intervals: list = field(default_factory=lambda: [(0.0, 0.6)])
    architecture: str = "arch5"
    lr: float = 1e-4
    adam_beta1: float = 0.0
    adam_beta2: float = 0.9
    iterations: int = 20000
    batch_size: int = 1
    seed: int = 0
    image_size: int = 64
    base_channels: int = 32
    resblock_count: int = 4
    rnl_threshold: float = 0.8
    rnl_soft_train: bool = False
    l1_weight: float = 1.0
    adv_weight: float = 0.1
    adv_kind: str = "hinge"
    eval_count: int = 100
    log_every: int = 250
    dtype: str = "float32"
    prefetch: bool = True

    def __post_init__(self):
        if self.mask_mode not in MASK_MODES:
            raise ConfigError(f"mask_mode must be one of {MASK_MODES}, got {self.mask_mode!r}")
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(
                f"unknown architecture {self.architecture!r}; choose from {sorted(ARCHITECTURES)}"
            )
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.iterations < 1 or self.batch_size < 1:
            raise ConfigError("iterations and batch_size must be positive")
        if self.image_size % 4:
            raise ConfigError(f"image_size must be divisible by 4, got {self.image_size}")
        if self.eval_count < 1:
            raise ConfigError("eval_count must be positive")

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "mask_intervals":
                value = format_intervals(value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(name: str, raw: str):
    if name == "mask_intervals":
        return _parse_intervals(raw)
    kind = _FIELD_TYPES[name]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            lowered = raw.lower()
            if lowered in ("true", "1", "yes"):
                return True
            if lowered in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {exc}") from exc


def parse_config_text(text: str) -> ExperimentConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw.strip())
    return ExperimentConfig(**values)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config_text(path.read_text())


def validate_run_paths(cfg: ExperimentConfig) -> None:
    """Existence checks deferred to run start."""
    if not cfg.dataset_dir or not Path(cfg.dataset_dir).is_dir():
        raise ConfigError(f"dataset_dir {cfg.dataset_dir!r} does not exist")
    if not cfg.output_dir:
        raise ConfigError("output_dir is required")
    if cfg.mask_mode == "external_dir" and not Path(cfg.mask_dir).is_dir():
        raise ConfigError(f"mask_dir {cfg.mask_dir!r} does not exist")
