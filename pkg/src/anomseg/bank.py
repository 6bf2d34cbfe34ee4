"""Memory-bank construction with k-NN-score prototype subsampling.

Anomaly-free feature vectors are reduced to a compact, diverse prototype
set: each vector gets a subsampling score counting how many of its k
nearest neighbors lie closer than the global mean k-NN distance.  Low
scores mark sparsely populated feature-space regions, so sorting by score
ascending and keeping the first n vectors favors informative prototypes
over near-duplicates.  A subset-wise variant runs the same selection
independently on random disjoint subsets and merges the results.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _dist
from .errors import ConfigError, DataError

DEFAULT_LAYERS = (7, 15, 23, 31)
DEFAULT_TARGET_SIZE = 50_000


@dataclass(frozen=True)
class FeatureSet:
    """A bag of D-dimensional float32 feature vectors from one layer."""

    data: np.ndarray
    layer_id: int = 0

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DataError(f"feature matrix must be (count, dim), got {arr.shape}")
        if not np.isfinite(arr).all():
            raise DataError("feature matrix contains NaN or Inf")
        object.__setattr__(self, "data", arr)

    @property
    def count(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class SubsamplingConfig:
    k: int = 100
    target_size: int = DEFAULT_TARGET_SIZE
    subset_count: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.target_size < 1:
            raise ConfigError(f"target_size must be >= 1, got {self.target_size}")
        if self.subset_count < 1:
            raise ConfigError(f"subset_count must be >= 1, got {self.subset_count}")


@dataclass(frozen=True)
class MemoryBank:
    """Immutable per-layer prototype matrices plus build metadata."""

    layers: dict[int, np.ndarray]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for arr in self.layers.values():
            arr.setflags(write=False)

    @property
    def layer_ids(self) -> tuple[int, ...]:
        return tuple(sorted(self.layers))


def knn_distances(features: FeatureSet, k: int) -> np.ndarray:
    """Distances from every vector to its k nearest neighbors (self excluded).

    Returns a (count, k) float64 matrix, each row sorted ascending.
    """
    if k >= features.count:
        raise DataError(f"k too large: k={k} needs at least {k + 1} vectors")
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    return _dist.knn_smallest(features.data, k)


def global_tau(knn: np.ndarray) -> float:
    """Mean of all k-NN distances; the global density threshold."""
    knn = np.asarray(knn)
    if knn.size == 0:
        raise DataError("empty k-NN matrix")
    return float(np.mean(knn))


def subsampling_scores(knn: np.ndarray, tau: float) -> np.ndarray:
    """Per-vector count of the k neighbors closer than tau (strict)."""
    return (np.asarray(knn) < tau).sum(axis=1).astype(np.int64)


def _selection_order(data: np.ndarray, k: int) -> np.ndarray:
    if k >= data.shape[0]:
        raise DataError(f"k too large: k={k} needs at least {k + 1} vectors")
    knn = _dist.knn_smallest(data, k)
    scores = subsampling_scores(knn, global_tau(knn))
    return np.argsort(scores, kind="stable")


def select_prototypes(features: FeatureSet, config: SubsamplingConfig) -> np.ndarray:
    """Retain the target_size vectors with the lowest subsampling scores.

    Ties are broken by original index, so output order is (score, index)
    ascending and the result is reproducible bit for bit.
    """
    if config.target_size > features.count:
        raise DataError(
            f"target_size {config.target_size} > feature count {features.count}"
        )
    order = _selection_order(features.data, config.k)[: config.target_size]
    return features.data[order].copy()


def select_prototypes_subsetwise(
    features: FeatureSet, config: SubsamplingConfig
) -> np.ndarray:
    """Subset-wise accelerated selection: partition, select, merge.

    The features are partitioned uniformly at random (seeded) into
    subset_count disjoint subsets; the plain selection runs per subset with
    target ceil(target_size / subset_count) and the selected prototypes are
    concatenated without deduplication.
    """
    if config.subset_count == 1:
        return select_prototypes(features, config)
    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(features.count)
    parts = np.array_split(perm, config.subset_count)
    per_target = math.ceil(config.target_size / config.subset_count)
    chunks = []
    for part in parts:
        if len(part) <= config.k:
            raise DataError(
                f"subset too small for k: {len(part)} vectors, k={config.k}"
            )
        if per_target > len(part):
            raise DataError(
                f"per-subset target {per_target} > subset size {len(part)}"
            )
        order = _selection_order(features.data[part], config.k)[:per_target]
        chunks.append(features.data[part[order]])
    return np.concatenate(chunks, axis=0).copy()


def build_bank(
    per_layer_features: dict[int, FeatureSet],
    config: SubsamplingConfig,
    required_layers=None,
    extra_metadata: dict | None = None,
) -> MemoryBank:
    """Select prototypes for every layer and freeze them into a bank."""
    layers = sorted(per_layer_features) if required_layers is None else list(required_layers)
    missing = [l for l in layers if l not in per_layer_features]
    if missing:
        raise DataError(f"missing feature layers: {missing}")
    select = (
        select_prototypes_subsetwise if config.subset_count > 1 else select_prototypes
    )
    prototypes = {l: select(per_layer_features[l], config) for l in layers}
    metadata = {
        "k": config.k,
        "target_size": config.target_size,
        "subset_count": config.subset_count,
        "seed": config.seed,
        "source_counts": {str(l): per_layer_features[l].count for l in layers},
    }
    if extra_metadata:
        metadata.update(extra_metadata)
    return MemoryBank(layers=prototypes, metadata=metadata)
