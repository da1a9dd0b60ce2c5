"""Flat TOML configuration with ``key=value`` overrides."""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Sequence

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .core import InstsynthError


class ConfigError(InstsynthError):
    pass


@dataclass
class Settings:
    model_id: str = "gpt-4.1-mini"
    api_base_url: str = "https://api.openai.com/v1"
    api_key_env: str = "OPENAI_API_KEY"
    request_timeout_seconds: float = 120.0
    price_input_per_million: float = 0.0
    price_output_per_million: float = 0.0
    max_iterations: int = 30
    wall_seconds: float = 10.0
    memory_mb: int = 512
    switch_mode: str = "zero_shot"
    switch_model_path: str = ""
    seed: int = 0
    concurrency: int = 8
    cache_mode: str = "passthrough"
    cache_dir: str = ".instsynth-cache"
    pot_max_retries: int = 3
    temperature: float = 0.0
    calibration_fraction: float = 0.2
    hm_offset: float = 0.0
    keep_trace: bool = True

    def validate(self) -> "Settings":
        if self.cache_mode not in ("record", "replay", "passthrough"):
            raise ConfigError(f"cache_mode must be record, replay or passthrough, not {self.cache_mode!r}")
        if self.switch_mode not in ("zero_shot", "trained"):
            raise ConfigError(f"switch_mode must be zero_shot or trained, not {self.switch_mode!r}")
        if self.switch_mode == "trained" and not self.switch_model_path:
            raise ConfigError("switch_mode 'trained' needs switch_model_path")
        for name in ("max_iterations", "concurrency", "pot_max_retries", "memory_mb"):
            if getattr(self, name) < (0 if name == "max_iterations" else 1):
                raise ConfigError(f"{name} is out of range")
        if self.wall_seconds <= 0:
            raise ConfigError("wall_seconds must be positive")
        if not 0 < self.calibration_fraction < 1:
            raise ConfigError("calibration_fraction must be in (0, 1)")
        return self


_FIELDS = {f.name: f for f in fields(Settings)}


def _coerce(key: str, value: Any) -> Any:
    target = type(getattr(Settings(), key))
    if isinstance(value, str) and target is not str:
        if target is bool:
            low = value.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ConfigError(f"{key}: expected a boolean, got {value!r}")
            return low in ("true", "1", "yes")
        try:
            return target(value)
        except ValueError:
            raise ConfigError(f"{key}: expected {target.__name__}, got {value!r}") from None
    if target is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if not isinstance(value, target) or (target is int and isinstance(value, bool)):
        raise ConfigError(f"{key}: expected {target.__name__}, got {type(value).__name__}")
    return value


def load_settings(path: str | Path | None = None, overrides: Sequence[str] = ()) -> Settings:
    """File values first, then ``key=value`` overrides; unknown keys are rejected."""
    values: dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, "rb") as f:
                data = tomllib.load(f)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"invalid TOML in {path}: {e}") from None
        for key, value in data.items():
            if key not in _FIELDS:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _coerce(key, value)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, value)
    return dataclasses.replace(Settings(), **values).validate()
