"""SADE interchange writer, implementing the byte contract directly.

Layout (little-endian, see the consumer's docs/formats.md): magic "SADE",
u32 version, length-prefixed UTF-8 image id, original height/width,
downscale numerator/denominator, token size, patch size, min overlap,
layer count, per-layer (id, rows, cols, dim) descriptors, then for every
patch in row-major order and every layer in header order the raw float32
token embeddings.
"""

from __future__ import annotations

import os
import struct

import numpy as np

VERSION = 1


def write_sade(
    path,
    image_id: str,
    original_hw: tuple[int, int],
    downscale: tuple[int, int],
    token_size: int,
    patch_size: int,
    min_overlap: int,
    per_patch_layers: list[dict[int, np.ndarray]],
) -> None:
    """per_patch_layers: one {layer_id: rows x cols x dim float32} per patch,
    patches in row-major grid order."""
    if not per_patch_layers:
        raise ValueError("no patches to write")
    layer_ids = sorted(per_patch_layers[0])
    per_side = patch_size // token_size
    parts = [b"SADE", struct.pack("<I", VERSION)]
    ident = image_id.encode("utf-8")
    parts += [struct.pack("<I", len(ident)), ident]
    parts.append(
        struct.pack(
            "<7I",
            original_hw[0],
            original_hw[1],
            downscale[0],
            downscale[1],
            token_size,
            patch_size,
            min_overlap,
        )
    )
    parts.append(struct.pack("<I", len(layer_ids)))
    dims = {}
    for layer in layer_ids:
        grid = per_patch_layers[0][layer]
        dims[layer] = grid.shape[2]
        parts.append(struct.pack("<4I", layer, grid.shape[0], grid.shape[1], dims[layer]))
    for patch in per_patch_layers:
        for layer in layer_ids:
            grid = np.ascontiguousarray(patch[layer], dtype="<f4")
            if grid.shape != (per_side, per_side, dims[layer]):
                raise ValueError(
                    f"layer {layer} grid {grid.shape} != "
                    f"{(per_side, per_side, dims[layer])}"
                )
            parts.append(grid.tobytes())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(b"".join(parts))
    os.replace(tmp, path)
