#!/usr/bin/env python3
"""
Scene Sources
Ground-truth exposure images: seeded synthetic scenes, PGM files and tensor files
"""

import logging
import os
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from errors import ConfigError, FormatError, ValidationError
from tensor_io import read_pgm, read_tensor

logger = logging.getLogger(__name__)

SYNTHETIC_PREFIX = "synthetic:"


def synthetic_scene(size: int, range_max: float, seed: int, hdr: bool = False) -> np.ndarray:
    """Smooth blobs, a few flat rectangles and a soft gradient, scaled to [0, range_max].

    With `hdr` the normalized scene u is mapped to expm1(u log(1 + range_max)),
    so intensities spread over every decade of the range.
    """
    if size < 1:
        raise ValidationError(f"scene size must be >= 1, got {size}")
    if not range_max > 0:
        raise ValidationError(f"range maximum must be > 0, got {range_max}")
    rng = np.random.default_rng(seed)
    rows, cols = np.mgrid[0:size, 0:size] / max(size - 1, 1)

    scene = 0.3 * (rng.uniform() * rows + rng.uniform() * cols)
    for _ in range(6):
        cy, cx = rng.uniform(0, 1, 2)
        width = rng.uniform(0.05, 0.25)
        scene += rng.uniform(0.2, 1.0) * np.exp(-((rows - cy) ** 2 + (cols - cx) ** 2) / (2 * width ** 2))
    for _ in range(3):
        r0, c0 = rng.integers(0, size, 2)
        h, w = rng.integers(max(size // 8, 1), max(size // 3, 2), 2)
        scene[r0:r0 + h, c0:c0 + w] = rng.uniform(0.0, 1.2)
    scene = gaussian_filter(scene, sigma=max(size / 128.0, 0.5))

    scene -= scene.min()
    peak = scene.max()
    unit = scene / peak if peak > 0 else scene
    if hdr:
        return np.expm1(unit * np.log1p(range_max))
    return unit * range_max


def _center_crop(image: np.ndarray, size: Optional[int]) -> np.ndarray:
    if size is None:
        return image
    if min(image.shape) < size:
        raise ValidationError(f"scene {image.shape} is smaller than the requested {size}x{size}")
    top = (image.shape[0] - size) // 2
    left = (image.shape[1] - size) // 2
    return image[top:top + size, left:left + size]


def load_scene(source: str, size: Optional[int] = None, range_max: float = 10.0,
               hdr: bool = False) -> np.ndarray:
    """Ground truth from `synthetic:<seed>`, a P5 PGM (scaled to [0, range_max]) or a float tensor file"""
    if source.startswith(SYNTHETIC_PREFIX):
        try:
            seed = int(source[len(SYNTHETIC_PREFIX):])
        except ValueError:
            raise ConfigError(f"bad synthetic scene seed in '{source}'")
        return synthetic_scene(size or 64, range_max, seed, hdr)

    if not os.path.exists(source):
        raise ConfigError(f"scene file not found: {source}")
    if source.lower().endswith(".pgm"):
        raw, maxval = read_pgm(source)
        image = raw.astype(np.float64) / maxval * range_max
    else:
        image = read_tensor(source)
        if image.ndim != 2:
            raise FormatError(f"scene tensor must be 2-D, got rank {image.ndim}")
        if (image < 0).any() or not np.isfinite(image).all():
            raise ValidationError(f"scene {source} has negative or non-finite values")
    logger.debug(f"Loaded scene {source} with shape {image.shape}")
    return _center_crop(np.asarray(image, dtype=np.float64), size)
