"""Command-line pipeline: synth, build-bank, calibrate, infer, evaluate.

One configuration drives every stage; given the same dataset, config, and
seed the produced banks, maps, masks, and reports are byte-identical across
runs and across worker counts.  Exit codes: 0 ok, 2 configuration error,
3 data error, 4 internal error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import bank as bank_mod
from . import calibrate, formats, metrics, morphpost, scorer, synth, tiler
from .config import ENV_CONFIG_PATH, PipelineConfig, load_config
from .errors import ConfigError, DataError
from .formats import DatasetManifest, EmbeddingFile, ManifestEntry
from .tiler import ImageGeom

log = logging.getLogger("anomseg")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_INTERNAL = 4


def _quarter_geom(geom: ImageGeom) -> ImageGeom:
    return ImageGeom(-(-geom.height // 4), -(-geom.width // 4))


def _load_entry(entry: ManifestEntry, config: PipelineConfig) -> EmbeddingFile:
    ef = formats.read_embeddings(entry.embedding_path)
    if ef.image_id != entry.image_id:
        raise DataError(
            f"{entry.embedding_path}: file is for {ef.image_id!r}, "
            f"manifest says {entry.image_id!r}"
        )
    if ef.original_geom != entry.geom:
        raise DataError(
            f"{entry.embedding_path}: geometry {ef.original_geom} != manifest {entry.geom}"
        )
    if ef.patch_size != config.patch_size or ef.min_overlap != config.min_overlap:
        raise DataError(
            f"{entry.embedding_path}: grid parameters P={ef.patch_size} O={ef.min_overlap} "
            f"do not match config P={config.patch_size} O={config.min_overlap}"
        )
    missing = [l for l in config.layers if l not in ef.layer_ids]
    if missing:
        raise DataError(f"{entry.embedding_path}: missing layers {missing}")
    return ef


def _owned_features(ef: EmbeddingFile, layer: int) -> np.ndarray:
    """Per-image feature matrix with each full-image token counted once.

    Overlap duplicates are discarded by the same nearest-patch-center
    ownership rule used at inference.
    """
    grid = ef.grid
    blocks = [(p, ef.maps[(p, layer)].data) for p in grid.indices()]
    field = tiler.assemble(blocks, grid, ef.token_size)
    return field.reshape(-1, field.shape[-1])


def _token_map(ef: EmbeddingFile, bank: bank_mod.MemoryBank, config: PipelineConfig):
    return scorer.score_image(
        ef.maps,
        ef.grid,
        bank,
        scale=ef.token_scale,
        normalize=config.normalize_layers,
    )


def _parallel(jobs: int, fn, items):
    if jobs <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _config_from_args(args, class_name: str) -> PipelineConfig:
    config = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        config = dataclasses.replace(config, seed=args.seed)
    return config.for_class(class_name, strict_challenge=args.strict_challenge)


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> int:
    spec = synth.load_spec(args.spec) if args.spec else synth.SynthSpec()
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    paths = synth.generate(spec, args.output)
    log.info("wrote %s and %s", paths["train_manifest"], paths["test_manifest"])
    return EXIT_OK


def cmd_build_bank(args) -> int:
    manifest = formats.read_manifest(args.manifest)
    if manifest.split != "train":
        raise DataError(f"bank must be built from the train split, got {manifest.split!r}")
    if not manifest.entries:
        raise DataError(f"manifest {args.manifest} has no images")
    config = _config_from_args(args, manifest.class_name)
    bank_ids, holdout_ids = calibrate.split_holdout(
        manifest.image_ids(), config.holdout_fraction, config.seed
    )
    log.info("bank images: %d, holdout images: %d", len(bank_ids), len(holdout_ids))

    def collect_one(image_id):
        ef = _load_entry(manifest.entry(image_id), config)
        return [_owned_features(ef, layer) for layer in config.layers]

    per_image = _parallel(args.jobs, collect_one, bank_ids)
    features = {
        layer: bank_mod.FeatureSet(
            np.concatenate([chunks[i] for chunks in per_image]), layer_id=layer
        )
        for i, layer in enumerate(config.layers)
    }
    sub_config = bank_mod.SubsamplingConfig(
        k=config.k,
        target_size=config.target_size,
        subset_count=config.subset_count,
        seed=config.seed,
    )
    built = bank_mod.build_bank(
        features,
        sub_config,
        required_layers=config.layers,
        extra_metadata={
            "class_name": manifest.class_name,
            "source_image_count": len(bank_ids),
            "holdout_fraction": config.holdout_fraction,
        },
    )
    formats.write_bank(args.output, built)
    split_record = {
        "class_name": manifest.class_name,
        "seed": config.seed,
        "bank_ids": bank_ids,
        "holdout_ids": holdout_ids,
    }
    split_path = f"{args.output}.split.json"
    with open(f"{split_path}.tmp", "w", encoding="utf-8") as f:
        json.dump(split_record, f, sort_keys=True, indent=2)
        f.write("\n")
    os.replace(f"{split_path}.tmp", split_path)
    log.info("bank written to %s (sha256 %s)", args.output, formats.file_sha256(args.output))
    return EXIT_OK


def cmd_calibrate(args) -> int:
    manifest = formats.read_manifest(args.manifest)
    config = _config_from_args(args, manifest.class_name)
    bank = formats.read_bank(args.bank)
    split_path = args.split or f"{args.bank}.split.json"
    try:
        with open(split_path, encoding="utf-8") as f:
            split_record = json.load(f)
    except FileNotFoundError:
        raise DataError(f"split record not found: {split_path}") from None
    holdout_ids = split_record["holdout_ids"]
    unknown = [i for i in holdout_ids if i not in set(manifest.image_ids())]
    if unknown:
        raise DataError(f"holdout ids not in manifest: {unknown}")

    def score_one(image_id):
        ef = _load_entry(manifest.entry(image_id), config)
        return _token_map(ef, bank, config)

    holdout_maps = _parallel(args.jobs, score_one, holdout_ids)
    result = calibrate.estimate_threshold(
        holdout_maps, config.percentile, config.gain, config.holdout_fraction
    )
    calibrate.write_calibration(
        args.output, result, seed=config.seed, bank_hash=formats.file_sha256(args.bank)
    )
    log.info(
        "threshold %.6g (gain %.3g x p%.4g of %d values) -> %s",
        result.threshold, result.gain, result.percentile, result.sample_count, args.output,
    )
    return EXIT_OK


def cmd_infer(args) -> int:
    manifest = formats.read_manifest(args.manifest)
    config = _config_from_args(args, manifest.class_name)
    bank = formats.read_bank(args.bank)
    cal, _ = calibrate.read_calibration(args.calibration)
    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)

    def infer_one(entry: ManifestEntry):
        try:
            ef = _load_entry(entry, config)
            token_map = _token_map(ef, bank, config)
            formats.write_map(out_dir / f"{entry.image_id}.sadm", token_map)
            up = scorer.upsample_map(token_map, _quarter_geom(entry.geom))
            formats.write_map(out_dir / f"{entry.image_id}.up.sadm", up)
            mask = morphpost.postprocess(
                up,
                cal,
                orientations=config.orientations,
                radius=config.radius,
                gate_factor=config.gate_factor,
            )
            if args.full_res_masks:
                mask = scorer.resize_nearest(mask, entry.geom.height, entry.geom.width)
            formats.write_mask(
                out_dir / f"{entry.image_id}.mask.{args.mask_format}",
                mask,
                fmt=args.mask_format,
            )
            return None
        except Exception as exc:  # per-image failures must not stop the run
            return (entry.image_id, f"{type(exc).__name__}: {exc}")

    failures = [r for r in _parallel(args.jobs, infer_one, manifest.entries) if r]
    for image_id, message in failures:
        log.error("inference failed for %s: %s", image_id, message)
    if failures:
        raise DataError(f"{len(failures)} of {len(manifest.entries)} images failed")
    log.info("wrote maps and masks for %d images to %s", len(manifest.entries), out_dir)
    return EXIT_OK


def _load_prediction(pred_dir: Path, image_id: str):
    mask_path = None
    for suffix in ("png", "pgm"):
        candidate = pred_dir / f"{image_id}.mask.{suffix}"
        if candidate.exists():
            mask_path = candidate
            break
    map_path = pred_dir / f"{image_id}.up.sadm"
    if mask_path is None or not map_path.exists():
        return None
    return formats.read_mask(mask_path), formats.read_map(map_path)


def cmd_evaluate(args) -> int:
    pred_dir = Path(args.pred)
    per_class: dict[str, metrics.ClassResult] = {}
    for manifest_path in args.manifest:
        manifest = formats.read_manifest(manifest_path)
        gt_entries = [e for e in manifest.entries if e.mask_path is not None]
        if not gt_entries:
            raise DataError(f"manifest {manifest_path} has no ground-truth masks")
        missing = [
            e.image_id for e in gt_entries if _load_prediction(pred_dir, e.image_id) is None
        ]
        if missing:
            raise DataError(f"missing predictions for images: {missing}")
        preds, gts, maps = {}, {}, {}
        for entry in gt_entries:
            pred_mask, up_map = _load_prediction(pred_dir, entry.image_id)
            gt = formats.read_mask(entry.mask_path)
            if gt.shape != pred_mask.shape:
                if gt.shape[0] > pred_mask.shape[0] or gt.shape[1] > pred_mask.shape[1]:
                    raise DataError(
                        f"{entry.image_id}: ground truth {gt.shape} larger than "
                        f"prediction {pred_mask.shape}"
                    )
                gt = scorer.resize_nearest(gt, *pred_mask.shape)
            scores = up_map.scores
            if scores.shape != pred_mask.shape:
                scores = scorer.resize_nearest(scores, *pred_mask.shape)
            preds[entry.image_id] = pred_mask
            gts[entry.image_id] = gt
            maps[entry.image_id] = scores
        per_class[manifest.class_name] = metrics.evaluate_class(preds, gts, maps)

    report = metrics.make_report(per_class)
    if args.output:
        with open(f"{args.output}.tmp", "w", encoding="utf-8") as f:
            json.dump(report, f, sort_keys=True, indent=2)
            f.write("\n")
        os.replace(f"{args.output}.tmp", args.output)
    print(metrics.format_report_table(report))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="anomseg",
        description="Training-free anomaly segmentation pipeline",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument(
            "--config",
            default=None,
            help=f"pipeline config JSON (default: ${ENV_CONFIG_PATH} or built-ins)",
        )
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument(
            "--strict-challenge",
            action="store_true",
            help="refuse any per-class config override",
        )
        p.add_argument("--jobs", type=int, default=1, help="parallel image workers")

    p = sub.add_parser("synth", help="generate a synthetic embedding dataset")
    p.add_argument("--spec", default=None, help="SynthSpec JSON (defaults if omitted)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--output", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("build-bank", help="subsample prototypes into a memory bank")
    p.add_argument("--manifest", required=True)
    p.add_argument("--output", required=True, help="bank file (SADB)")
    common(p)
    p.set_defaults(fn=cmd_build_bank)

    p = sub.add_parser("calibrate", help="estimate the decision threshold")
    p.add_argument("--manifest", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--split", default=None, help="split record (default: <bank>.split.json)")
    p.add_argument("--output", required=True, help="calibration JSON")
    common(p)
    p.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("infer", help="score images and write maps and masks")
    p.add_argument("--manifest", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--calibration", required=True)
    p.add_argument("--output", required=True, help="output directory")
    p.add_argument("--mask-format", choices=("png", "pgm"), default="png")
    p.add_argument(
        "--full-res-masks",
        action="store_true",
        help="nearest-neighbor upscale masks to the original resolution",
    )
    common(p)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("evaluate", help="pixel-level evaluation report")
    p.add_argument("--pred", required=True, help="directory written by infer")
    p.add_argument("--manifest", required=True, nargs="+", help="ground-truth manifests")
    p.add_argument("--output", default=None, help="report JSON path")
    p.set_defaults(fn=cmd_evaluate)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.fn(args)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except DataError as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except Exception:
        log.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
