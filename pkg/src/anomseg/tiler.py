"""Overlapping patch grids and token-level reassembly.

An image is covered by equally sized P x P windows whose start positions
are spread linearly between 0 and L - P, guaranteeing a minimum overlap
between adjacent windows without any padding.  After per-patch inference,
redundant predictions in overlap regions are discarded by assigning every
token to the patch whose center is nearest (ties go to the lower patch
index in row-major order), which partitions the token grid exactly once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError

TOKEN_SIZE = 16


@dataclass(frozen=True)
class ImageGeom:
    """Pixel geometry of one image (height, width)."""

    height: int
    width: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise DataError(f"invalid image geometry {self.height}x{self.width}")


@dataclass(frozen=True)
class PatchGrid:
    """Placement of overlapping square patches over an image.

    ``starts_y`` / ``starts_x`` are strictly increasing pixel offsets; the
    first is 0 and the last is L - P along each axis.
    """

    patch_size: int
    min_overlap: int
    starts_y: tuple[int, ...]
    starts_x: tuple[int, ...]

    @property
    def n_y(self) -> int:
        return len(self.starts_y)

    @property
    def n_x(self) -> int:
        return len(self.starts_x)

    @property
    def patch_count(self) -> int:
        return self.n_y * self.n_x

    @property
    def image_height(self) -> int:
        return self.starts_y[-1] + self.patch_size

    @property
    def image_width(self) -> int:
        return self.starts_x[-1] + self.patch_size

    def indices(self) -> list[tuple[int, int]]:
        """All (iy, ix) patch indices in row-major order."""
        return [(iy, ix) for iy in range(self.n_y) for ix in range(self.n_x)]


@dataclass(frozen=True)
class TokenGridGeom:
    """Token-grid geometry of an image or patch; tokens are 16 px square."""

    rows: int
    cols: int
    token_size: int = TOKEN_SIZE


def _round_half_toward_zero(numer: int, denom: int) -> int:
    # nearest integer to numer/denom (both >= 0), ties rounded down
    return (2 * numer + denom - 1) // (2 * denom)


def compute_axis_starts(length: int, patch_size: int, min_overlap: int) -> list[int]:
    """Start offsets of overlapping patches along one axis.

    The patch count is ceil((L - P) / (P - 2*O)) + 1 and the starts are a
    linear spread over [0, L - P] rounded to integers (nearest, ties toward
    zero).  Adjacent starts are then at most P - 2*O apart, i.e. adjacent
    patches overlap by at least 2*O pixels.

    Raises:
        DataError: image smaller than the patch (padding is never applied).
        ConfigError: patch_size <= 2 * min_overlap leaves no forward stride.
    """
    if min_overlap < 0:
        raise ConfigError(f"negative overlap {min_overlap}")
    if patch_size <= 2 * min_overlap:
        raise ConfigError(
            f"degenerate stride: patch_size {patch_size} <= 2 * overlap {min_overlap}"
        )
    if length < patch_size:
        raise DataError(
            f"image smaller than patch: length {length} < patch_size {patch_size}"
        )
    span = length - patch_size
    if span == 0:
        return [0]
    stride = patch_size - 2 * min_overlap
    n = -(-span // stride) + 1  # ceil division
    starts = [_round_half_toward_zero(i * span, n - 1) for i in range(n)]
    max_gap = max(b - a for a, b in zip(starts, starts[1:]))
    if max_gap > stride:
        raise AssertionError(
            f"rounding violated the overlap bound: gap {max_gap} > {stride}"
        )
    return starts


def build_grid(geom: ImageGeom, patch_size: int, min_overlap: int) -> PatchGrid:
    """Per-axis patch grid for an image; both dimensions must fit one patch."""
    return PatchGrid(
        patch_size=patch_size,
        min_overlap=min_overlap,
        starts_y=tuple(compute_axis_starts(geom.height, patch_size, min_overlap)),
        starts_x=tuple(compute_axis_starts(geom.width, patch_size, min_overlap)),
    )


def _check_token_alignment(grid: PatchGrid, token_size: int) -> None:
    if grid.patch_size % token_size:
        raise DataError(
            f"patch size {grid.patch_size} not a multiple of token size {token_size}"
        )
    for starts in (grid.starts_y, grid.starts_x):
        for s in starts:
            if s % token_size:
                raise DataError(
                    f"patch start {s} not aligned to token size {token_size}"
                )


def _axis_owner(starts: tuple[int, ...], patch_size: int, token_size: int) -> np.ndarray:
    """Owning patch index for every token position along one axis.

    A token belongs to the patch whose pixel center is nearest to the
    token's pixel center; on ties the lower patch index wins.
    """
    length = starts[-1] + patch_size
    n_tokens = length // token_size
    t = np.arange(n_tokens, dtype=np.int64)
    # centers in quadrupled coordinates to stay in exact integer arithmetic
    token_c4 = 4 * t * token_size + 2 * (token_size - 1)
    s = np.asarray(starts, dtype=np.int64)
    # midpoints between adjacent patch centers, also quadrupled
    mid4 = 2 * (s[:-1] + s[1:] + patch_size - 1)
    return np.searchsorted(mid4, token_c4, side="left")


def _axis_slices(starts, patch_size, token_size):
    """Per-patch (owned_slice, local_slice) pairs along one axis."""
    owner = _axis_owner(starts, patch_size, token_size)
    slices = []
    for i, s in enumerate(starts):
        where = np.flatnonzero(owner == i)
        lo, hi = int(where[0]), int(where[-1]) + 1
        first_token = s // token_size
        slices.append((slice(lo, hi), slice(lo - first_token, hi - first_token)))
    return slices


def token_grid(grid: PatchGrid, token_size: int = TOKEN_SIZE) -> TokenGridGeom:
    """Full-image token geometry implied by a (token-aligned) grid."""
    _check_token_alignment(grid, token_size)
    return TokenGridGeom(
        rows=grid.image_height // token_size,
        cols=grid.image_width // token_size,
        token_size=token_size,
    )


def ownership_mask(
    grid: PatchGrid, patch_index: tuple[int, int], token_size: int = TOKEN_SIZE
) -> np.ndarray:
    """Boolean mask of full-image tokens owned by one patch.

    The masks over all patches are pairwise disjoint and tile the token grid
    exactly once.
    """
    iy, ix = patch_index
    if not (0 <= iy < grid.n_y and 0 <= ix < grid.n_x):
        raise DataError(f"patch index {patch_index} outside {grid.n_y}x{grid.n_x} grid")
    geom = token_grid(grid, token_size)
    owner_y = _axis_owner(grid.starts_y, grid.patch_size, token_size)
    owner_x = _axis_owner(grid.starts_x, grid.patch_size, token_size)
    mask = np.zeros((geom.rows, geom.cols), dtype=bool)
    mask[np.ix_(owner_y == iy, owner_x == ix)] = True
    return mask


def assemble(
    per_patch_maps, grid: PatchGrid, token_size: int = TOKEN_SIZE
) -> np.ndarray:
    """Merge per-patch token maps into one full-image token map.

    Args:
        per_patch_maps: iterable of ((iy, ix), 2-D score array) covering
            every patch of the grid exactly once; each array must be
            (P/token_size) square.
        grid: the patch grid the maps were computed on.

    Each output token takes the value of its owning patch, so overlapping
    duplicate predictions are discarded deterministically.
    """
    geom = token_grid(grid, token_size)
    per_side = grid.patch_size // token_size
    by_index = {}
    trailing = None
    for patch_index, arr in per_patch_maps:
        if patch_index in by_index:
            raise DataError(f"duplicate map for patch {patch_index}")
        arr = np.asarray(arr)
        if arr.shape[:2] != (per_side, per_side) or (
            trailing is not None and arr.shape[2:] != trailing
        ):
            raise DataError(
                f"patch {patch_index} map shape {arr.shape} != ({per_side}, {per_side}, ...)"
            )
        trailing = arr.shape[2:]
        by_index[patch_index] = arr
    missing = [p for p in grid.indices() if p not in by_index]
    if missing:
        raise DataError(f"missing patch maps: {missing}")
    extra = [p for p in by_index if p not in set(grid.indices())]
    if extra:
        raise DataError(f"unexpected patch maps: {extra}")

    slices_y = _axis_slices(grid.starts_y, grid.patch_size, token_size)
    slices_x = _axis_slices(grid.starts_x, grid.patch_size, token_size)
    first = next(iter(by_index.values()))
    out = np.empty((geom.rows, geom.cols) + trailing, dtype=first.dtype)
    for (iy, ix), arr in by_index.items():
        own_y, loc_y = slices_y[iy]
        own_x, loc_x = slices_x[ix]
        out[own_y, own_x] = arr[loc_y, loc_x]
    return out
