"""Image preprocessing: downscale, channel normalization, intensity jitter.

Images are bilinearly downscaled by the configured factor (default 5/8),
normalized per channel, and, on the train split only, scaled by a random
intensity factor drawn uniformly from the jitter range to simulate varying
illumination.  The jitter multiplies the normalized tensor (one factor per
image) and the factor sequence is fully determined by the seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

# standard large-scale-pretraining channel statistics; configurable, the
# functions below never assume these particular values
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class PreprocessConfig:
    downscale: tuple[int, int] = (5, 8)
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD
    jitter: tuple[float, float] = (0.8, 1.2)
    seed: int = 0

    def __post_init__(self):
        num, den = self.downscale
        if num < 1 or den < 1:
            raise ValueError(f"invalid downscale {self.downscale}")
        lo, hi = self.jitter
        if not 0 < lo <= hi:
            raise ValueError(f"invalid jitter range {self.jitter}")


def scaled_length(length: int, num: int, den: int) -> int:
    """Downscaled pixel length; must agree with the SADE consumer's rule."""
    return (length * num + den // 2) // den


def preprocess(
    image: np.ndarray,
    config: PreprocessConfig,
    split: str,
    rng: np.random.Generator | None = None,
) -> torch.Tensor:
    """HxWx3 uint8/float image -> normalized 3xH'xW' float32 tensor.

    Jitter is applied only when ``split == "train"``; pass the run's seeded
    generator so the per-image factor sequence is reproducible.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {image.shape}")
    x = torch.tensor(image, dtype=torch.float32)
    if image.dtype == np.uint8:
        x = x / 255.0
    x = x.permute(2, 0, 1).unsqueeze(0)
    num, den = config.downscale
    target = (scaled_length(image.shape[0], num, den), scaled_length(image.shape[1], num, den))
    if target != x.shape[-2:]:
        x = F.interpolate(x, size=target, mode="bilinear", align_corners=False)
    mean = torch.tensor(config.mean, dtype=torch.float32).view(1, 3, 1, 1)
    std = torch.tensor(config.std, dtype=torch.float32).view(1, 3, 1, 1)
    x = (x - mean) / std
    if split == "train":
        if rng is None:
            rng = np.random.default_rng(config.seed)
        factor = float(rng.uniform(*config.jitter))
        x = x * factor
    return x.squeeze(0)
