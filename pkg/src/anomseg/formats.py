"""Dataset manifests, binary interchange files, and mask image IO.

Three little-endian binary formats share the same conventions (4-byte
magic, explicit u32 version):

* SADE — per-image embeddings, stored per patch so the overlap-discard
  rule stays owned by this package;
* SADB — the memory bank (per-layer prototype matrices plus a trailing
  UTF-8 JSON metadata block);
* SADM — one real-valued anomaly map with its resolution scale.

Byte layouts are documented in docs/formats.md together with hex dumps of
golden files.  Masks round-trip through 8-bit P5 graymaps or PNG with
0 = normal and 255 = anomalous.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import tiler
from .bank import MemoryBank
from .errors import DataError, FormatError
from .scorer import AnomalyMap, EmbeddingMap
from .tiler import ImageGeom, PatchGrid

SADB_MAGIC = b"SADB"
SADM_MAGIC = b"SADM"
SADE_MAGIC = b"SADE"
FORMAT_VERSION = 1

SPLITS = ("train", "test_public", "test_private", "test_private_mixed")


def scaled_length(length: int, num: int, den: int) -> int:
    """Downscaled pixel length: nearest integer, halves rounded up."""
    return (length * num + den // 2) // den


def scaled_geom(geom: ImageGeom, num: int, den: int) -> ImageGeom:
    return ImageGeom(
        height=scaled_length(geom.height, num, den),
        width=scaled_length(geom.width, num, den),
    )


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _atomic_write(path, data: bytes) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def _read_bytes(path) -> bytes:
    try:
        with open(path, "rb") as f:
            return f.read()
    except FileNotFoundError:
        raise DataError(f"file not found: {path}") from None


class _Reader:
    """Byte cursor that reports the offset of any truncation."""

    def __init__(self, data: bytes, path):
        self.data = data
        self.path = path
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise FormatError(
                f"{self.path}: truncated at byte {self.offset} "
                f"(needed {n} more, file has {len(self.data)})"
            )
        out = self.data[self.offset : self.offset + n]
        self.offset += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def rest(self) -> bytes:
        out = self.data[self.offset :]
        self.offset = len(self.data)
        return out


def _expect_magic(r: _Reader, magic: bytes) -> None:
    got = r.take(4)
    if got != magic:
        raise FormatError(f"{r.path}: bad magic {got!r}, expected {magic!r}")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise FormatError(f"{r.path}: unsupported version {version}")


# ---------------------------------------------------------------------------
# manifest

@dataclass(frozen=True)
class ManifestEntry:
    image_id: str
    geom: ImageGeom
    embedding_path: Path
    mask_path: Path | None = None


@dataclass(frozen=True)
class DatasetManifest:
    class_name: str
    split: str
    entries: list[ManifestEntry]

    def image_ids(self) -> list[str]:
        return [e.image_id for e in self.entries]

    def entry(self, image_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.image_id == image_id:
                return e
        raise DataError(f"unknown image id {image_id!r}")


def read_manifest(path) -> DatasetManifest:
    """Load and eagerly validate a dataset manifest (UTF-8 JSON)."""
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise DataError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest {path} is not valid JSON: {exc}") from None
    for key in ("class_name", "split", "entries"):
        if key not in raw:
            raise FormatError(f"manifest {path} missing field {key!r}")
    if raw["split"] not in SPLITS:
        raise FormatError(f"manifest {path}: unknown split {raw['split']!r}")
    base = path.parent
    entries = []
    seen = set()
    for i, e in enumerate(raw["entries"]):
        for key in ("image_id", "height", "width", "embedding"):
            if key not in e:
                raise FormatError(f"manifest {path} entry {i} missing field {key!r}")
        image_id = e["image_id"]
        if image_id in seen:
            raise DataError(f"manifest {path}: duplicate image_id {image_id!r}")
        seen.add(image_id)
        emb_path = base / e["embedding"]
        if not emb_path.exists():
            raise DataError(f"manifest {path}: embedding file missing: {emb_path}")
        mask_path = None
        if e.get("mask") is not None:
            if raw["split"] == "train":
                raise DataError(
                    f"manifest {path}: train split must be anomaly-free, "
                    f"but {image_id!r} has a ground-truth mask"
                )
            mask_path = base / e["mask"]
            if not mask_path.exists():
                raise DataError(f"manifest {path}: mask file missing: {mask_path}")
        entries.append(
            ManifestEntry(
                image_id=image_id,
                geom=ImageGeom(height=int(e["height"]), width=int(e["width"])),
                embedding_path=emb_path,
                mask_path=mask_path,
            )
        )
    return DatasetManifest(class_name=raw["class_name"], split=raw["split"], entries=entries)


def write_manifest(path, manifest: DatasetManifest) -> None:
    base = Path(path).parent
    payload = {
        "class_name": manifest.class_name,
        "split": manifest.split,
        "entries": [
            {
                "image_id": e.image_id,
                "height": e.geom.height,
                "width": e.geom.width,
                "embedding": os.path.relpath(e.embedding_path, base),
                "mask": None if e.mask_path is None else os.path.relpath(e.mask_path, base),
            }
            for e in manifest.entries
        ],
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
        f.write("\n")
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# SADE embedding interchange

@dataclass(frozen=True)
class EmbeddingFile:
    """All per-(patch, layer) token embeddings of one image."""

    image_id: str
    original_geom: ImageGeom
    downscale: tuple[int, int]
    token_size: int
    patch_size: int
    min_overlap: int
    maps: dict[tuple[tuple[int, int], int], EmbeddingMap] = field(repr=False)

    @property
    def grid(self) -> PatchGrid:
        return tiler.build_grid(self.scaled_geom, self.patch_size, self.min_overlap)

    @property
    def scaled_geom(self) -> ImageGeom:
        return scaled_geom(self.original_geom, *self.downscale)

    @property
    def layer_ids(self) -> tuple[int, ...]:
        return tuple(sorted({layer for (_, layer) in self.maps}))

    @property
    def token_scale(self) -> tuple[int, int]:
        return (self.downscale[0], self.downscale[1] * self.token_size)


def write_embeddings(path, ef: EmbeddingFile) -> None:
    grid = ef.grid
    layer_ids = ef.layer_ids
    per_side = ef.patch_size // ef.token_size
    layer_dims = {}
    for layer in layer_ids:
        first = ef.maps.get((grid.indices()[0], layer))
        if first is None:
            raise DataError(f"missing embeddings for patch {grid.indices()[0]} layer {layer}")
        layer_dims[layer] = first.dim
    head = [SADE_MAGIC, struct.pack("<I", FORMAT_VERSION)]
    ident = ef.image_id.encode("utf-8")
    head.append(struct.pack("<I", len(ident)))
    head.append(ident)
    head.append(
        struct.pack(
            "<7I",
            ef.original_geom.height,
            ef.original_geom.width,
            ef.downscale[0],
            ef.downscale[1],
            ef.token_size,
            ef.patch_size,
            ef.min_overlap,
        )
    )
    head.append(struct.pack("<I", len(layer_ids)))
    for layer in layer_ids:
        head.append(struct.pack("<4I", layer, per_side, per_side, layer_dims[layer]))
    body = []
    for patch_index in grid.indices():
        for layer in layer_ids:
            emb = ef.maps.get((patch_index, layer))
            if emb is None:
                raise DataError(f"missing embeddings for patch {patch_index} layer {layer}")
            if emb.rows != per_side or emb.cols != per_side or emb.dim != layer_dims[layer]:
                raise DataError(
                    f"patch {patch_index} layer {layer} has shape "
                    f"{(emb.rows, emb.cols, emb.dim)}, expected "
                    f"{(per_side, per_side, layer_dims[layer])}"
                )
            body.append(np.ascontiguousarray(emb.data, dtype="<f4").tobytes())
    _atomic_write(path, b"".join(head) + b"".join(body))


def read_embeddings(path) -> EmbeddingFile:
    """Parse a SADE file, cross-checking the declared grid against the tiler."""
    r = _Reader(_read_bytes(path), path)
    _expect_magic(r, SADE_MAGIC)
    ident = r.take(r.u32()).decode("utf-8")
    height, width, ds_num, ds_den, token_size, patch_size, min_overlap = (
        struct.unpack("<7I", r.take(28))
    )
    if token_size != tiler.TOKEN_SIZE:
        raise FormatError(f"{path}: token size {token_size} != {tiler.TOKEN_SIZE}")
    if patch_size % token_size:
        raise FormatError(
            f"{path}: patch size {patch_size} not a multiple of token size {token_size}"
        )
    n_layers = r.u32()
    if n_layers < 1:
        raise FormatError(f"{path}: no layers declared")
    per_side = patch_size // token_size
    layers = []
    prev = -1
    for _ in range(n_layers):
        layer_id, rows, cols, dim = struct.unpack("<4I", r.take(16))
        if layer_id <= prev:
            raise FormatError(f"{path}: layer ids not strictly increasing at {layer_id}")
        prev = layer_id
        if rows != per_side or cols != per_side:
            raise FormatError(
                f"{path}: layer {layer_id} grid {rows}x{cols} inconsistent with "
                f"patch size {patch_size} / token size {token_size}"
            )
        if dim < 1:
            raise FormatError(f"{path}: layer {layer_id} has dim {dim}")
        layers.append((layer_id, rows, cols, dim))
    original = ImageGeom(height=height, width=width)
    grid = tiler.build_grid(scaled_geom(original, ds_num, ds_den), patch_size, min_overlap)
    per_patch_bytes = sum(rows * cols * dim * 4 for (_, rows, cols, dim) in layers)
    expected = grid.patch_count * per_patch_bytes
    remaining = len(r.data) - r.offset
    if remaining != expected:
        raise FormatError(
            f"{path}: payload is {remaining} bytes at offset {r.offset}, "
            f"expected {expected} for a {grid.n_y}x{grid.n_x} patch grid"
        )
    maps = {}
    for patch_index in grid.indices():
        for layer_id, rows, cols, dim in layers:
            raw = r.take(rows * cols * dim * 4)
            data = np.frombuffer(raw, dtype="<f4").reshape(rows, cols, dim)
            maps[(patch_index, layer_id)] = EmbeddingMap(layer_id=layer_id, data=data)
    return EmbeddingFile(
        image_id=ident,
        original_geom=original,
        downscale=(ds_num, ds_den),
        token_size=token_size,
        patch_size=patch_size,
        min_overlap=min_overlap,
        maps=maps,
    )


# ---------------------------------------------------------------------------
# SADB memory bank

def write_bank(path, bank: MemoryBank) -> None:
    parts = [SADB_MAGIC, struct.pack("<I", FORMAT_VERSION)]
    layer_ids = sorted(bank.layers)
    parts.append(struct.pack("<I", len(layer_ids)))
    for layer in layer_ids:
        protos = np.ascontiguousarray(bank.layers[layer], dtype="<f4")
        parts.append(struct.pack("<IQI", layer, protos.shape[0], protos.shape[1]))
        parts.append(protos.tobytes())
    parts.append(json.dumps(bank.metadata, sort_keys=True).encode("utf-8"))
    _atomic_write(path, b"".join(parts))


def read_bank(path) -> MemoryBank:
    r = _Reader(_read_bytes(path), path)
    _expect_magic(r, SADB_MAGIC)
    n_layers = r.u32()
    layers = {}
    prev = -1
    for _ in range(n_layers):
        layer_id, m, dim = struct.unpack("<IQI", r.take(16))
        if layer_id <= prev:
            raise FormatError(f"{path}: layer ids not strictly increasing at {layer_id}")
        prev = layer_id
        if m < 1 or dim < 1:
            raise FormatError(f"{path}: layer {layer_id} has empty prototype matrix")
        raw = r.take(m * dim * 4)
        layers[layer_id] = np.frombuffer(raw, dtype="<f4").reshape(m, dim).copy()
    meta_raw = r.rest()
    try:
        metadata = json.loads(meta_raw.decode("utf-8")) if meta_raw else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad metadata block: {exc}") from None
    return MemoryBank(layers=layers, metadata=metadata)


# ---------------------------------------------------------------------------
# SADM anomaly map

def write_map(path, amap: AnomalyMap) -> None:
    if amap.scale is None:
        raise DataError("anomaly map has no resolution scale set")
    head = struct.pack(
        "<4sI4I", SADM_MAGIC, FORMAT_VERSION, amap.rows, amap.cols, *amap.scale
    )
    _atomic_write(path, head + np.ascontiguousarray(amap.scores, dtype="<f4").tobytes())


def read_map(path) -> AnomalyMap:
    r = _Reader(_read_bytes(path), path)
    _expect_magic(r, SADM_MAGIC)
    rows, cols, num, den = struct.unpack("<4I", r.take(16))
    if rows < 1 or cols < 1:
        raise FormatError(f"{path}: empty map {rows}x{cols}")
    raw = r.take(rows * cols * 4)
    if r.offset != len(r.data):
        raise FormatError(f"{path}: {len(r.data) - r.offset} trailing bytes")
    scores = np.frombuffer(raw, dtype="<f4").reshape(rows, cols)
    return AnomalyMap(scores=scores, scale=(num, den))


# ---------------------------------------------------------------------------
# mask images

def write_mask(path, mask: np.ndarray, fmt: str | None = None) -> None:
    """Write a binary mask as an 8-bit image (0 normal, 255 anomalous)."""
    mask = np.asarray(mask)
    if mask.dtype != bool:
        raise DataError(f"mask must be boolean, got dtype {mask.dtype}")
    fmt = (fmt or Path(path).suffix.lstrip(".")).lower()
    img = (mask.astype(np.uint8)) * 255
    if fmt == "pgm":
        header = f"P5\n{mask.shape[1]} {mask.shape[0]}\n255\n".encode("ascii")
        _atomic_write(path, header + img.tobytes())
    elif fmt == "png":
        tmp = f"{path}.tmp"
        Image.fromarray(img, mode="L").save(tmp, format="PNG")
        os.replace(tmp, path)
    else:
        raise DataError(f"unsupported mask format {fmt!r} (use png or pgm)")


def _read_pgm(path) -> np.ndarray:
    data = _read_bytes(path)
    fields = []
    offset = 0
    while len(fields) < 4:
        while offset < len(data) and data[offset : offset + 1].isspace():
            offset += 1
        if data[offset : offset + 1] == b"#":
            while offset < len(data) and data[offset] != 0x0A:
                offset += 1
            continue
        start = offset
        while offset < len(data) and not data[offset : offset + 1].isspace():
            offset += 1
        fields.append(data[start:offset])
    if fields[0] != b"P5":
        raise FormatError(f"{path}: not a P5 graymap")
    width, height, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise FormatError(f"{path}: unsupported bit depth (maxval {maxval})")
    offset += 1  # single whitespace byte after maxval
    raw = data[offset : offset + width * height]
    if len(raw) != width * height:
        raise FormatError(f"{path}: truncated at byte {offset + len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(height, width)


def read_mask(path) -> np.ndarray:
    """Read a binary mask image; any value other than 0/255 is an error."""
    suffix = Path(path).suffix.lower()
    if suffix == ".pgm":
        img = _read_pgm(path)
    elif suffix == ".png":
        if not Path(path).exists():
            raise DataError(f"file not found: {path}")
        with Image.open(path) as im:
            if im.mode != "L":
                raise FormatError(f"{path}: unsupported bit depth (mode {im.mode})")
            img = np.asarray(im, dtype=np.uint8)
    else:
        raise DataError(f"unsupported mask format {suffix!r} (use .png or .pgm)")
    bad = np.setdiff1d(np.unique(img), [0, 255])
    if bad.size:
        raise DataError(f"{path}: non-binary pixel values {bad.tolist()[:8]}")
    return img == 255
