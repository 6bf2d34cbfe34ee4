"""Threshold self-calibration from held-out anomaly-free images.

A fraction (default 1/8) of the training images is excluded from bank
construction and scored through the identical inference path up to the
fused floating-point distance map.  The decision threshold is a constant
gain (default 1.4, useful range 1.3 to 1.5) times the 95th percentile of
all pooled holdout map values.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, DataError
from .scorer import AnomalyMap

DEFAULT_PERCENTILE = 0.95
DEFAULT_GAIN = 1.4
DEFAULT_HOLDOUT_FRACTION = 0.125


@dataclass(frozen=True)
class CalibrationResult:
    threshold: float
    percentile: float
    gain: float
    holdout_fraction: float
    sample_count: int


def split_holdout(
    image_ids: list[str],
    fraction: float = DEFAULT_HOLDOUT_FRACTION,
    seed: int = 0,
) -> tuple[list[str], list[str]]:
    """Seeded random split into (bank_ids, holdout_ids).

    The holdout gets round(count * fraction) images, at least one; both
    halves keep the original list order.
    """
    if len(image_ids) < 2:
        raise DataError(f"need at least 2 images to split, got {len(image_ids)}")
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"holdout fraction must be in (0, 1), got {fraction}")
    if len(set(image_ids)) != len(image_ids):
        raise DataError("duplicate image ids in split input")
    n_holdout = max(1, int(np.floor(len(image_ids) * fraction + 0.5)))
    rng = np.random.default_rng(seed)
    chosen = set(rng.permutation(len(image_ids))[:n_holdout].tolist())
    holdout = [x for i, x in enumerate(image_ids) if i in chosen]
    bank = [x for i, x in enumerate(image_ids) if i not in chosen]
    return bank, holdout


def percentile(values: np.ndarray, p: float) -> float:
    """Linear-interpolated percentile (index p * (count - 1) into the sort)."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise DataError("percentile of empty value set")
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"percentile fraction must be in [0, 1], got {p}")
    return float(np.quantile(values, p))


def estimate_threshold(
    holdout_maps: list[AnomalyMap],
    p: float = DEFAULT_PERCENTILE,
    gain: float = DEFAULT_GAIN,
    holdout_fraction: float = DEFAULT_HOLDOUT_FRACTION,
) -> CalibrationResult:
    """Gain-scaled percentile of all holdout map values pooled together."""
    if not holdout_maps:
        raise DataError("no holdout maps for threshold estimation")
    if gain < 1.0:
        raise ConfigError(f"gain must be >= 1, got {gain}")
    pooled = np.concatenate([m.scores.ravel() for m in holdout_maps])
    theta = gain * percentile(pooled, p)
    return CalibrationResult(
        threshold=float(theta),
        percentile=float(p),
        gain=float(gain),
        holdout_fraction=float(holdout_fraction),
        sample_count=int(pooled.size),
    )


def write_calibration(path, result: CalibrationResult, seed: int, bank_hash: str) -> None:
    payload = dict(asdict(result), seed=seed, bank_hash=bank_hash)
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
        f.write("\n")
    os.replace(tmp, path)


def read_calibration(path) -> tuple[CalibrationResult, dict]:
    """Load a calibration file; returns (result, full payload dict)."""
    try:
        with open(path, encoding="utf-8") as f:
            payload = json.load(f)
    except FileNotFoundError:
        raise DataError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"calibration file {path} is not valid JSON: {exc}") from None
    fields = ("threshold", "percentile", "gain", "holdout_fraction", "sample_count")
    missing = [k for k in fields if k not in payload]
    if missing:
        raise DataError(f"calibration file {path} missing fields: {missing}")
    result = CalibrationResult(**{k: payload[k] for k in fields})
    return result, payload
