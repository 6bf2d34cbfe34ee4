"""Binary-mask post-processing: threshold, line closing, gating, hole fill.

The real-valued anomaly map is binarized at the calibrated threshold, then
closed 16 times with line structuring elements of radius 26 at evenly
spaced orientations in [0, 180); the per-orientation results are OR-merged.
This reconnects fragmented elongated detections.  The closed mask is gated
(logical AND) with a laxer mask thresholded at 0.8 x theta to prevent
oversegmentation, and finally enclosed background holes are filled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .calibrate import CalibrationResult
from .errors import DataError
from .scorer import AnomalyMap

DEFAULT_ORIENTATIONS = 16
DEFAULT_RADIUS = 26
DEFAULT_GATE_FACTOR = 0.8

# 4-connectivity for the background flood fill
_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass(frozen=True)
class LineElement:
    """Rasterized line segment structuring element, symmetric about origin."""

    radius: int
    angle: float
    offsets: tuple[tuple[int, int], ...]


def _round_symmetric(u: float) -> int:
    # odd rounding (ties away from zero) keeps the rasterization point-symmetric
    return int(math.copysign(math.floor(abs(u) + 0.5), u))


def line_element(radius: int, angle: float) -> LineElement:
    """Integer rasterization of a line through the origin.

    The segment runs from (-r*sin, -r*cos) to (+r*sin, +r*cos) in (dy, dx)
    image coordinates and is stepped symmetrically along its dominant axis,
    giving exactly 2*radius + 1 offsets containing the origin.
    """
    if radius < 1:
        raise DataError(f"line radius must be >= 1, got {radius}")
    if not 0.0 <= angle < 180.0:
        raise DataError(f"angle must be in [0, 180), got {angle}")
    s = math.sin(math.radians(angle))
    c = math.cos(math.radians(angle))
    offsets = []
    if abs(c) >= abs(s):
        slope = s / c
        for t in range(-radius, radius + 1):
            offsets.append((_round_symmetric(t * slope), t))
    else:
        slope = c / s
        for t in range(-radius, radius + 1):
            offsets.append((t, _round_symmetric(t * slope)))
    return LineElement(radius=radius, angle=float(angle), offsets=tuple(offsets))


def threshold_mask(amap: AnomalyMap, theta: float) -> np.ndarray:
    """Strict comparison: a pixel is anomalous iff its score exceeds theta."""
    if theta < 0:
        raise DataError(f"threshold must be >= 0, got {theta}")
    return amap.scores > theta


def _shift(mask: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Shift with zero fill; out[p] = mask[p - (dy, dx)] where defined."""
    out = np.zeros_like(mask)
    rows, cols = mask.shape
    ys = slice(max(dy, 0), rows + min(dy, 0))
    xs = slice(max(dx, 0), cols + min(dx, 0))
    ys_src = slice(max(-dy, 0), rows + min(-dy, 0))
    xs_src = slice(max(-dx, 0), cols + min(-dx, 0))
    out[ys, xs] = mask[ys_src, xs_src]
    return out


def _dilate(mask: np.ndarray, offsets) -> np.ndarray:
    out = np.zeros_like(mask)
    for dy, dx in offsets:
        out |= _shift(mask, dy, dx)
    return out


def _erode(mask: np.ndarray, offsets) -> np.ndarray:
    out = np.ones_like(mask)
    for dy, dx in offsets:
        out &= _shift(mask, -dy, -dx)
    return out


def close_with_element(
    mask: np.ndarray, elem: LineElement, pad: int | None = None
) -> np.ndarray:
    """Morphological closing on a zero-padded domain (pad = radius + 1).

    Padding by at least radius + 1 makes the result equal to closing on an
    unbounded plane restricted back to the image, suppressing border
    artifacts; the padding is removed before returning.
    """
    mask = np.asarray(mask, dtype=bool)
    if pad is None:
        pad = elem.radius + 1
    if pad < elem.radius + 1:
        raise DataError(f"padding {pad} < radius + 1 = {elem.radius + 1}")
    padded = np.pad(mask, pad)
    closed = _erode(_dilate(padded, elem.offsets), elem.offsets)
    return closed[pad:-pad, pad:-pad]


def multi_orient_close(
    mask: np.ndarray,
    orientations: int = DEFAULT_ORIENTATIONS,
    radius: int = DEFAULT_RADIUS,
) -> np.ndarray:
    """OR of closings with evenly spaced line orientations in [0, 180)."""
    if orientations < 1:
        raise DataError(f"orientations must be >= 1, got {orientations}")
    mask = np.asarray(mask, dtype=bool)
    out = np.zeros_like(mask)
    for i in range(orientations):
        elem = line_element(radius, i * 180.0 / orientations)
        out |= close_with_element(mask, elem)
    return out


def gate_mask(
    closed: np.ndarray,
    amap: AnomalyMap,
    theta: float,
    gate_factor: float = DEFAULT_GATE_FACTOR,
) -> np.ndarray:
    """AND with the map thresholded at gate_factor * theta."""
    closed = np.asarray(closed, dtype=bool)
    if closed.shape != amap.scores.shape:
        raise DataError(
            f"geometry mismatch: mask {closed.shape} vs map {amap.scores.shape}"
        )
    return closed & threshold_mask(amap, gate_factor * theta)


def fill_holes(mask: np.ndarray) -> np.ndarray:
    """Fill background regions not 4-connected to the image border."""
    return ndimage.binary_fill_holes(np.asarray(mask, dtype=bool), structure=_CROSS)


def postprocess(
    amap: AnomalyMap,
    cal: CalibrationResult | float,
    orientations: int = DEFAULT_ORIENTATIONS,
    radius: int = DEFAULT_RADIUS,
    gate_factor: float = DEFAULT_GATE_FACTOR,
) -> np.ndarray:
    """Full chain: threshold, multi-orient close, gate, fill holes."""
    theta = cal.threshold if isinstance(cal, CalibrationResult) else float(cal)
    raw = threshold_mask(amap, theta)
    closed = multi_orient_close(raw, orientations=orientations, radius=radius)
    gated = gate_mask(closed, amap, theta, gate_factor=gate_factor)
    return fill_holes(gated)
