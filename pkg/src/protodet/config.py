"""Flat ``key = value`` configuration with dotted keys.

File < command-line overrides; the effective configuration is echoed into
every run directory in the same format it is parsed from.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigurationError


@dataclass
class TrainConfig:
    seed: int = 0
    iterations: int = 8000
    lr: float = 0.01
    lr_decay_at: float = 0.75  # fraction of iterations, then lr x0.1
    weight_decay: float = 1e-4
    momentum: float = 0.9
    stages: int = 3
    lam: float = 0.03
    temperature: float = 0.2
    warmup_fraction: float = 0.1
    nms_threshold: float = 0.4
    checkpoint_every: int = 1000
    bank_size: int = 6
    bank_momentum: float = 0.7
    bank_negatives: bool = True
    bank_score_floor: float = 0.1
    pls_enabled: bool = True
    pls_discard_rule: str = "above_tau"
    aug_sigma: float = 0.05
    aug_dropout: float = 0.1
    dropblock_p: float = 0.1

    def validate(self) -> None:
        if self.iterations < 1:
            raise ConfigurationError("iterations must be >= 1")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigurationError("lr must be > 0 and weight_decay >= 0")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must lie in [0, 1)")
        if self.stages < 1:
            raise ConfigurationError("stages must be >= 1")
        if self.lam < 0:
            raise ConfigurationError("lambda must be >= 0")
        if self.temperature <= 0:
            raise ConfigurationError("temperature must be > 0")
        if not 0 <= self.warmup_fraction < 1:
            raise ConfigurationError("warmup_fraction must lie in [0, 1)")
        if not 0 < self.nms_threshold < 1:
            raise ConfigurationError("nms_threshold must lie in (0, 1)")
        if self.bank_size < 1:
            raise ConfigurationError("bank.size must be >= 1")
        if not 0 <= self.bank_momentum < 1:
            raise ConfigurationError("bank.momentum must lie in [0, 1)")
        if self.pls_discard_rule not in ("above_tau", "below_tau"):
            raise ConfigurationError("pls.discard_rule must be above_tau or below_tau")

    @property
    def bank_active(self) -> bool:
        return self.pls_enabled or self.lam > 0.0

    @property
    def warmup_iterations(self) -> int:
        return int(self.warmup_fraction * self.iterations)


# dotted config key <-> dataclass field
_KEY_TO_FIELD = {
    "seed": "seed",
    "iterations": "iterations",
    "lr": "lr",
    "lr_decay_at": "lr_decay_at",
    "weight_decay": "weight_decay",
    "momentum": "momentum",
    "stages": "stages",
    "lambda": "lam",
    "temperature": "temperature",
    "warmup_fraction": "warmup_fraction",
    "nms_threshold": "nms_threshold",
    "checkpoint_every": "checkpoint_every",
    "bank.size": "bank_size",
    "bank.momentum": "bank_momentum",
    "bank.negatives": "bank_negatives",
    "bank.score_floor": "bank_score_floor",
    "pls.enabled": "pls_enabled",
    "pls.discard_rule": "pls_discard_rule",
    "aug.sigma": "aug_sigma",
    "aug.dropout": "aug_dropout",
    "dropblock_p": "dropblock_p",
}
_FIELD_TO_KEY = {v: k for k, v in _KEY_TO_FIELD.items()}
_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _coerce(key: str, raw: str):
    name = _KEY_TO_FIELD[key]
    kind = _FIELD_TYPES[name]
    raw = raw.strip()
    if kind in ("bool", bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigurationError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if kind in ("int", int):
            return int(raw)
        if kind in ("float", float):
            return float(raw)
    except ValueError as e:
        raise ConfigurationError(f"{key}: {e}") from e
    return raw


def parse_assignments(lines) -> dict[str, object]:
    """``key = value`` pairs (comments with #, blank lines ignored)."""
    out: dict[str, object] = {}
    for i, line in enumerate(lines, start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigurationError(f"line {i}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _KEY_TO_FIELD:
            raise ConfigurationError(f"unknown config key {key!r}")
        out[_KEY_TO_FIELD[key]] = _coerce(key, raw)
    return out


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> TrainConfig:
    """Defaults, then file values, then ``key=value`` override strings."""
    values: dict[str, object] = {}
    if path is not None:
        text = Path(path).read_text()
        values.update(parse_assignments(text.splitlines()))
    if overrides:
        values.update(parse_assignments(overrides))
    cfg = TrainConfig(**values)
    cfg.validate()
    return cfg


def serialize_config(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(TrainConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{_FIELD_TO_KEY[f.name]} = {v}")
    return "\n".join(lines) + "\n"
