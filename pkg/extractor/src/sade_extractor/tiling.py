"""Overlapping patch placement for the downscaled image.

The patch count per axis is ceil((L - P) / (P - 2*O)) + 1; start positions
spread linearly over [0, L - P], rounded to the nearest integer with ties
toward zero.  This must reproduce the SADE consumer's grid exactly, so the
arithmetic below works in exact rational numbers.
"""

from __future__ import annotations

import math
from fractions import Fraction


def axis_starts(length: int, patch_size: int, min_overlap: int) -> list[int]:
    if patch_size <= 2 * min_overlap:
        raise ValueError(f"no forward stride: P={patch_size}, O={min_overlap}")
    if length < patch_size:
        raise ValueError(f"image length {length} smaller than patch {patch_size}")
    span = length - patch_size
    if span == 0:
        return [0]
    n = math.ceil(Fraction(span, patch_size - 2 * min_overlap)) + 1
    starts = []
    for i in range(n):
        x = Fraction(i * span, n - 1)
        base = math.floor(x)
        starts.append(base + 1 if x - base > Fraction(1, 2) else base)
    return starts


def grid_starts(height: int, width: int, patch_size: int, min_overlap: int):
    return (
        axis_starts(height, patch_size, min_overlap),
        axis_starts(width, patch_size, min_overlap),
    )
