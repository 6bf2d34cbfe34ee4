"""Deterministic synthetic embedding datasets with known ground truth.

Inlier token embeddings are drawn from a per-layer Gaussian mixture (one
cluster assignment grid per image, shared across layers).  Each anomalous
test image gets one rectangle of tokens displaced by a random unit vector
scaled to the anomaly magnitude, which must exceed four cluster standard
deviations so anomalies stay separable from the inlier distribution at the
fused-score level.  Output is entirely determined by the seed: embedding
files, manifests, and token-scale ground-truth masks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import formats, tiler
from .errors import ConfigError
from .formats import DatasetManifest, EmbeddingFile, ManifestEntry
from .scorer import EmbeddingMap
from .tiler import ImageGeom

DEFAULT_LAYER_DIMS = {7: 12, 15: 16, 23: 20, 31: 24}


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    train_count: int = 40
    test_anomalous_count: int = 20
    test_clean_count: int = 20
    height: int = 192
    width: int = 128
    downscale: tuple[int, int] = (1, 1)
    patch_size: int = 128
    min_overlap: int = 32
    token_size: int = tiler.TOKEN_SIZE
    layer_dims: dict[int, int] = field(default_factory=lambda: dict(DEFAULT_LAYER_DIMS))
    cluster_count: int = 3
    cluster_std: float = 1.0
    center_spread: float = 4.0
    anomaly_size: int = 6
    anomaly_magnitude: float = 9.0
    class_name: str = "synthetic"

    def __post_init__(self):
        if self.anomaly_magnitude <= 4.0 * self.cluster_std:
            raise ConfigError(
                f"anomaly magnitude {self.anomaly_magnitude} must exceed "
                f"4 x cluster std = {4.0 * self.cluster_std}"
            )
        if self.train_count < 2:
            raise ConfigError("need at least 2 training images")
        geom = self.scaled_geom
        if geom.height % self.token_size or geom.width % self.token_size:
            raise ConfigError(
                f"scaled geometry {geom.height}x{geom.width} not divisible by "
                f"token size {self.token_size}"
            )
        # fails loudly if the grid would be token-misaligned
        tiler.token_grid(self.grid, self.token_size)
        rows, cols = self.token_rows, self.token_cols
        if self.anomaly_size > min(rows, cols):
            raise ConfigError(
                f"anomaly rectangle {self.anomaly_size} exceeds token grid {rows}x{cols}"
            )

    @property
    def scaled_geom(self) -> ImageGeom:
        return formats.scaled_geom(ImageGeom(self.height, self.width), *self.downscale)

    @property
    def grid(self):
        return tiler.build_grid(self.scaled_geom, self.patch_size, self.min_overlap)

    @property
    def token_rows(self) -> int:
        return self.scaled_geom.height // self.token_size

    @property
    def token_cols(self) -> int:
        return self.scaled_geom.width // self.token_size


def load_spec(path) -> SynthSpec:
    """Read a SynthSpec from JSON; unknown keys are rejected."""
    with open(path, encoding="utf-8") as f:
        raw = json.load(f)
    valid = set(SynthSpec.__dataclass_fields__)
    unknown = sorted(set(raw) - valid)
    if unknown:
        raise ConfigError(f"unknown synth spec fields: {unknown}")
    if "layer_dims" in raw:
        raw["layer_dims"] = {int(k): int(v) for k, v in raw["layer_dims"].items()}
    if "downscale" in raw:
        raw["downscale"] = tuple(raw["downscale"])
    return SynthSpec(**raw)


def _make_image(rng, spec: SynthSpec, centers, rect):
    """Full-image token fields per layer; rect is (top, left) or None."""
    rows, cols = spec.token_rows, spec.token_cols
    assign = rng.integers(0, spec.cluster_count, (rows, cols))
    per_layer = {}
    for layer in sorted(spec.layer_dims):
        dim = spec.layer_dims[layer]
        field_ = centers[layer][assign] + spec.cluster_std * rng.normal(0, 1, (rows, cols, dim))
        if rect is not None:
            r0, c0 = rect
            u = rng.normal(0, 1, dim)
            u /= np.linalg.norm(u)
            field_[r0 : r0 + spec.anomaly_size, c0 : c0 + spec.anomaly_size] += (
                spec.anomaly_magnitude * u
            )
        per_layer[layer] = field_.astype(np.float32)
    return per_layer


def _to_embedding_file(spec: SynthSpec, image_id: str, per_layer) -> EmbeddingFile:
    grid = spec.grid
    ts = spec.token_size
    per_side = spec.patch_size // ts
    maps = {}
    for iy, sy in enumerate(grid.starts_y):
        for ix, sx in enumerate(grid.starts_x):
            r0, c0 = sy // ts, sx // ts
            for layer, field_ in per_layer.items():
                block = field_[r0 : r0 + per_side, c0 : c0 + per_side]
                maps[((iy, ix), layer)] = EmbeddingMap(layer_id=layer, data=block)
    return EmbeddingFile(
        image_id=image_id,
        original_geom=ImageGeom(spec.height, spec.width),
        downscale=spec.downscale,
        token_size=ts,
        patch_size=spec.patch_size,
        min_overlap=spec.min_overlap,
        maps=maps,
    )


def generate(spec: SynthSpec, out_dir) -> dict:
    """Write the dataset; returns paths of the two manifests.

    Layout: embeddings/<id>.sade, gt/<id>.png (test only, token scale),
    train.json and test.json manifests.
    """
    out = Path(out_dir)
    (out / "embeddings").mkdir(parents=True, exist_ok=True)
    (out / "gt").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    centers = {
        layer: rng.normal(0, spec.center_spread, (spec.cluster_count, dim))
        for layer, dim in sorted(spec.layer_dims.items())
    }
    rows, cols = spec.token_rows, spec.token_cols

    def write_image(image_id, rect):
        per_layer = _make_image(rng, spec, centers, rect)
        path = out / "embeddings" / f"{image_id}.sade"
        formats.write_embeddings(path, _to_embedding_file(spec, image_id, per_layer))
        return path

    train_entries = []
    for i in range(spec.train_count):
        image_id = f"train_{i:03d}"
        path = write_image(image_id, None)
        train_entries.append(
            ManifestEntry(image_id, ImageGeom(spec.height, spec.width), path)
        )

    test_entries = []
    rects = [
        (
            int(rng.integers(0, rows - spec.anomaly_size + 1)),
            int(rng.integers(0, cols - spec.anomaly_size + 1)),
        )
        for _ in range(spec.test_anomalous_count)
    ]
    for i, rect in enumerate(rects):
        image_id = f"test_anom_{i:03d}"
        path = write_image(image_id, rect)
        gt = np.zeros((rows, cols), dtype=bool)
        gt[rect[0] : rect[0] + spec.anomaly_size, rect[1] : rect[1] + spec.anomaly_size] = True
        gt_path = out / "gt" / f"{image_id}.png"
        formats.write_mask(gt_path, gt)
        test_entries.append(
            ManifestEntry(image_id, ImageGeom(spec.height, spec.width), path, gt_path)
        )
    for i in range(spec.test_clean_count):
        image_id = f"test_clean_{i:03d}"
        path = write_image(image_id, None)
        gt_path = out / "gt" / f"{image_id}.png"
        formats.write_mask(gt_path, np.zeros((rows, cols), dtype=bool))
        test_entries.append(
            ManifestEntry(image_id, ImageGeom(spec.height, spec.width), path, gt_path)
        )

    train_manifest = out / "train.json"
    test_manifest = out / "test.json"
    formats.write_manifest(
        train_manifest,
        DatasetManifest(spec.class_name, "train", train_entries),
    )
    formats.write_manifest(
        test_manifest,
        DatasetManifest(spec.class_name, "test_public", test_entries),
    )
    return {"train_manifest": train_manifest, "test_manifest": test_manifest}
