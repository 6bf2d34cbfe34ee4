"""Pipeline configuration: one shared parameter set for every class.

Defaults are the challenge values: 640 px patches with 128 px minimum
overlap, layers 7/15/23/31, k = 100, the 95th percentile with gain 1.4,
16 closing orientations at radius 26, gate factor 0.8, and a 1/8 holdout.
A config file may carry per-class overrides for experiments, but
``--strict-challenge`` refuses them: the class-agnostic contract is one
architecture and one hyperparameter configuration for all classes.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

from .errors import ConfigError

ENV_CONFIG_PATH = "ANOMSEG_CONFIG"


@dataclass(frozen=True)
class PipelineConfig:
    patch_size: int = 640
    min_overlap: int = 128
    layers: tuple[int, ...] = (7, 15, 23, 31)
    k: int = 100
    target_size: int = 50_000
    subset_count: int = 1
    percentile: float = 0.95
    gain: float = 1.4
    orientations: int = 16
    radius: int = 26
    gate_factor: float = 0.8
    holdout_fraction: float = 0.125
    seed: int = 0
    normalize_layers: bool = False
    class_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(int(l) for l in self.layers))
        if not self.layers or len(set(self.layers)) != len(self.layers):
            raise ConfigError(f"layers must be non-empty and unique, got {self.layers}")
        if self.patch_size <= 2 * self.min_overlap:
            raise ConfigError(
                f"patch_size {self.patch_size} <= 2 * min_overlap {self.min_overlap}"
            )
        if not 0.0 <= self.percentile <= 1.0:
            raise ConfigError(f"percentile must be in [0, 1], got {self.percentile}")
        if self.gain < 1.0:
            raise ConfigError(f"gain must be >= 1, got {self.gain}")
        if not 0.0 < self.gate_factor <= 1.0:
            raise ConfigError(f"gate_factor must be in (0, 1], got {self.gate_factor}")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ConfigError(
                f"holdout_fraction must be in (0, 1), got {self.holdout_fraction}"
            )
        for name in ("k", "target_size", "subset_count", "orientations", "radius"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")

    def for_class(self, class_name: str, strict_challenge: bool = False) -> "PipelineConfig":
        """Apply per-class overrides, unless running in challenge mode."""
        if strict_challenge and self.class_overrides:
            raise ConfigError(
                "per-class overrides are not permitted with --strict-challenge "
                f"(found overrides for: {sorted(self.class_overrides)})"
            )
        overrides = self.class_overrides.get(class_name, {})
        if not overrides:
            return self
        return replace_fields(self, overrides)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["layers"] = list(self.layers)
        return out


def replace_fields(config: PipelineConfig, fields: dict) -> PipelineConfig:
    valid = set(PipelineConfig.__dataclass_fields__)
    unknown = sorted(set(fields) - valid)
    if unknown:
        raise ConfigError(f"unknown config fields: {unknown}")
    if "layers" in fields:
        fields = dict(fields, layers=tuple(fields["layers"]))
    return dataclasses.replace(config, **fields)


def load_config(path=None) -> PipelineConfig:
    """Load a JSON config; falls back to $ANOMSEG_CONFIG, then defaults."""
    if path is None:
        path = os.environ.get(ENV_CONFIG_PATH)
    if path is None:
        return PipelineConfig()
    try:
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return replace_fields(PipelineConfig(), raw)
