"""Extractor front-end: raw images to SADE embedding files.

Input manifests list image files; the output directory receives one SADE
file per image plus a manifest in the consumer's schema (embedding paths,
original geometry, carried-over ground-truth masks).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import backbones, sade_writer, tiling
from .preprocess import IMAGENET_MEAN, IMAGENET_STD, PreprocessConfig, preprocess

log = logging.getLogger("sade_extractor")

SPLITS = ("train", "test_public", "test_private", "test_private_mixed")


@dataclass(frozen=True)
class ExtractorConfig:
    backbone: str = backbones.DEFAULT_BACKBONE
    backbone_args: dict = field(default_factory=dict)
    layers: tuple[int, ...] = (7, 15, 23, 31)
    patch_size: int = 640
    min_overlap: int = 128
    downscale: tuple[int, int] = (5, 8)
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD
    jitter: tuple[float, float] = (0.8, 1.2)
    seed: int = 0

    def preprocess_config(self) -> PreprocessConfig:
        return PreprocessConfig(
            downscale=self.downscale,
            mean=self.mean,
            std=self.std,
            jitter=self.jitter,
            seed=self.seed,
        )


def load_config(path) -> ExtractorConfig:
    if path is None:
        return ExtractorConfig()
    with open(path, encoding="utf-8") as f:
        raw = json.load(f)
    known = set(ExtractorConfig.__dataclass_fields__)
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ValueError(f"unknown extractor config fields: {unknown}")
    for key in ("layers", "downscale", "mean", "std", "jitter"):
        if key in raw:
            raw[key] = tuple(raw[key])
    return ExtractorConfig(**raw)


def extract_image(tensor: torch.Tensor, config: ExtractorConfig, model) -> dict:
    """Run the backbone per patch; returns starts plus per-patch token grids."""
    _, height, width = tensor.shape
    starts_y, starts_x = tiling.grid_starts(
        height, width, config.patch_size, config.min_overlap
    )
    per_side = config.patch_size // backbones.TOKEN_SIZE
    per_patch = []
    with torch.no_grad():
        for sy in starts_y:
            for sx in starts_x:
                crop = tensor[:, sy : sy + config.patch_size, sx : sx + config.patch_size]
                states = model(crop.unsqueeze(0))
                layers = {}
                for layer in config.layers:
                    grid = states[layer]
                    if grid.shape[:2] != (per_side, per_side):
                        raise ValueError(
                            f"backbone produced {tuple(grid.shape[:2])} tokens, "
                            f"expected {per_side}x{per_side}"
                        )
                    layers[layer] = grid.numpy().astype(np.float32)
                per_patch.append(layers)
    return {"starts_y": starts_y, "starts_x": starts_x, "patches": per_patch}


def run_extract(manifest_path, split, config_path, out_dir) -> int:
    config = load_config(config_path)
    model = backbones.load_backbone(
        config.backbone, config.layers, **config.backbone_args
    )
    with open(manifest_path, encoding="utf-8") as f:
        manifest = json.load(f)
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    out = Path(out_dir)
    (out / "embeddings").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(config.seed)
    pp_config = config.preprocess_config()
    base = Path(manifest_path).parent
    entries = []
    for entry in manifest["entries"]:
        image_id = entry["image_id"]
        with Image.open(base / entry["image"]) as im:
            image = np.asarray(im.convert("RGB"))
        tensor = preprocess(image, pp_config, split, rng)
        result = extract_image(tensor, config, model)
        sade_path = out / "embeddings" / f"{image_id}.sade"
        sade_writer.write_sade(
            sade_path,
            image_id,
            (image.shape[0], image.shape[1]),
            config.downscale,
            backbones.TOKEN_SIZE,
            config.patch_size,
            config.min_overlap,
            result["patches"],
        )
        out_entry = {
            "image_id": image_id,
            "height": image.shape[0],
            "width": image.shape[1],
            "embedding": str(sade_path.relative_to(out)),
        }
        if entry.get("mask") is not None:
            out_entry["mask"] = entry["mask"]
        entries.append(out_entry)
        log.info("extracted %s (%d patches)", image_id, len(result["patches"]))
    out_manifest = {
        "class_name": manifest["class_name"],
        "split": split,
        "entries": entries,
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(out_manifest, f, sort_keys=True, indent=2)
        f.write("\n")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="sade-extract")
    parser.add_argument("--manifest", required=True, help="image manifest JSON")
    parser.add_argument("--split", required=True, choices=SPLITS)
    parser.add_argument("--config", default=None, help="extractor config JSON")
    parser.add_argument("--out", required=True, help="output directory")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return run_extract(args.manifest, args.split, args.config, args.out)
    except (ValueError, OSError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
