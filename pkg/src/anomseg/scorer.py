"""Nearest-neighbor distance maps, layer fusion, and map upsampling.

For every 16 px token the anomaly score is the Euclidean distance to the
nearest prototype of that layer's memory bank.  Per-patch maps are
reassembled onto the full token grid (overlap duplicates discarded by the
tiler), the per-layer maps are averaged, and the fused map is bilinearly
upsampled to the output resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _dist, tiler
from .bank import MemoryBank
from .errors import DataError
from .tiler import ImageGeom, PatchGrid


@dataclass(frozen=True)
class EmbeddingMap:
    """rows x cols grid of D-dimensional token embeddings from one layer."""

    layer_id: int
    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DataError(f"embedding map must be (rows, cols, dim), got {arr.shape}")
        if not np.isfinite(arr).all():
            raise DataError("embedding map contains NaN or Inf")
        object.__setattr__(self, "data", arr)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class AnomalyMap:
    """Real-valued per-position anomaly scores, plus their resolution scale.

    ``scale`` is the (numerator, denominator) fraction of the original image
    resolution this map lives at, e.g. (10, 256) for token scale in the
    default chain or (1, 4) after upsampling; it travels with the data
    because the interchange files declare it.
    """

    scores: np.ndarray
    scale: tuple[int, int] | None = None

    def __post_init__(self):
        arr = np.ascontiguousarray(self.scores, dtype=np.float32)
        if arr.ndim != 2:
            raise DataError(f"anomaly map must be 2-D, got shape {arr.shape}")
        if not np.isfinite(arr).all() or (arr < 0).any():
            raise DataError("anomaly scores must be finite and >= 0")
        object.__setattr__(self, "scores", arr)
        if self.scale is not None:
            num, den = self.scale
            if num < 1 or den < 1:
                raise DataError(f"invalid scale {self.scale}")
            g = math.gcd(num, den)
            object.__setattr__(self, "scale", (num // g, den // g))

    @property
    def rows(self) -> int:
        return self.scores.shape[0]

    @property
    def cols(self) -> int:
        return self.scores.shape[1]


def nn_distance_map(
    emb: EmbeddingMap, prototypes: np.ndarray, scale: tuple[int, int] | None = None
) -> AnomalyMap:
    """Per-token distance to the nearest prototype (exact search)."""
    prototypes = np.asarray(prototypes)
    if prototypes.ndim != 2 or prototypes.shape[0] < 1:
        raise DataError(f"prototype matrix must be (m, dim), got {prototypes.shape}")
    if prototypes.shape[1] != emb.dim:
        raise DataError(
            f"dim mismatch: embeddings {emb.dim} vs prototypes {prototypes.shape[1]}"
        )
    flat = emb.data.reshape(-1, emb.dim)
    dist = _dist.nearest_distance(flat, prototypes)
    return AnomalyMap(dist.reshape(emb.rows, emb.cols).astype(np.float32), scale)


def fuse_layers(maps: list[AnomalyMap], normalize: bool = False) -> AnomalyMap:
    """Elementwise arithmetic mean across per-layer distance maps.

    With ``normalize`` each map is divided by its own mean first; this is an
    experimental knob (layer distance magnitudes differ) and is off by
    default, matching the plain averaging of the pipeline.
    """
    if not maps:
        raise DataError("no maps to fuse")
    shape = maps[0].scores.shape
    scale = maps[0].scale
    stack = []
    for m in maps:
        if m.scores.shape != shape or m.scale != scale:
            raise DataError(
                f"map geometry mismatch: {m.scores.shape}@{m.scale} vs {shape}@{scale}"
            )
        arr = m.scores.astype(np.float64)
        if normalize:
            mean = arr.mean()
            if mean > 0:
                arr = arr / mean
        stack.append(arr)
    fused = np.mean(stack, axis=0)
    return AnomalyMap(fused.astype(np.float32), scale)


def score_image(
    per_patch_embeddings: dict[tuple[tuple[int, int], int], EmbeddingMap],
    grid: PatchGrid,
    bank: MemoryBank,
    scale: tuple[int, int] | None = None,
    normalize: bool = False,
) -> AnomalyMap:
    """Fused token-scale anomaly map for one image.

    ``per_patch_embeddings`` maps (patch_index, layer_id) to the patch's
    embedding grid; every bank layer must be present for every patch.
    """
    layer_maps = []
    for layer_id in bank.layer_ids:
        per_patch = []
        for patch_index in grid.indices():
            emb = per_patch_embeddings.get((patch_index, layer_id))
            if emb is None:
                raise DataError(f"missing embeddings for patch {patch_index} layer {layer_id}")
            dist = nn_distance_map(emb, bank.layers[layer_id])
            per_patch.append((patch_index, dist.scores))
        full = tiler.assemble(per_patch, grid)
        layer_maps.append(AnomalyMap(full, scale))
    return fuse_layers(layer_maps, normalize=normalize)


def _axis_coords(n_in: int, n_out: int) -> np.ndarray:
    if n_out == 1:
        return np.zeros(1, dtype=np.float64)
    return np.arange(n_out, dtype=np.float64) * (n_in - 1) / (n_out - 1)


def resize_bilinear(src: np.ndarray, out_rows: int, out_cols: int) -> np.ndarray:
    """Corner-aligned bilinear resize; output extrema stay within the input's."""
    src = np.asarray(src, dtype=np.float64)
    y = _axis_coords(src.shape[0], out_rows)
    x = _axis_coords(src.shape[1], out_cols)
    y0 = np.minimum(y.astype(np.int64), src.shape[0] - 1)
    x0 = np.minimum(x.astype(np.int64), src.shape[1] - 1)
    y1 = np.minimum(y0 + 1, src.shape[0] - 1)
    x1 = np.minimum(x0 + 1, src.shape[1] - 1)
    wy = (y - y0)[:, None]
    wx = (x - x0)[None, :]
    top = (1.0 - wx) * src[np.ix_(y0, x0)] + wx * src[np.ix_(y0, x1)]
    bot = (1.0 - wx) * src[np.ix_(y1, x0)] + wx * src[np.ix_(y1, x1)]
    return (1.0 - wy) * top + wy * bot


def resize_nearest(src: np.ndarray, out_rows: int, out_cols: int) -> np.ndarray:
    """Corner-aligned nearest-neighbor resize (masks, ground truth)."""
    src = np.asarray(src)
    y = np.floor(_axis_coords(src.shape[0], out_rows) + 0.5).astype(np.int64)
    x = np.floor(_axis_coords(src.shape[1], out_cols) + 0.5).astype(np.int64)
    y = np.minimum(y, src.shape[0] - 1)
    x = np.minimum(x, src.shape[1] - 1)
    return src[np.ix_(y, x)]


def upsample_map(
    amap: AnomalyMap, target: ImageGeom, scale: tuple[int, int] = (1, 4)
) -> AnomalyMap:
    """Bilinear upsampling of a token-scale map to the output resolution."""
    out = resize_bilinear(amap.scores, target.height, target.width)
    return AnomalyMap(out.astype(np.float32), scale)
