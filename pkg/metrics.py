#!/usr/bin/env python3
"""
Image Quality Metrics
PSNR on linear and log(1 + x) intensities
"""

import math

import numpy as np

from errors import DimensionError, ValidationError


def _pair(x_hat, x_star):
    x_hat = np.asarray(x_hat, dtype=np.float64)
    x_star = np.asarray(x_star, dtype=np.float64)
    if x_hat.size == 0 or x_star.size == 0:
        raise ValidationError("cannot compare empty images")
    if x_hat.shape != x_star.shape:
        raise DimensionError(f"image shapes differ: {x_hat.shape} vs {x_star.shape}")
    return x_hat, x_star


def psnr(x_hat, x_star, peak: float) -> float:
    """10 log10(peak^2 / mse); +inf for identical images"""
    if not peak > 0:
        raise ValidationError(f"peak must be > 0, got {peak}")
    x_hat, x_star = _pair(x_hat, x_star)
    mse = float(np.mean((x_hat - x_star) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def log_psnr(x_hat, x_star, range_max: float) -> float:
    """PSNR of log(1 + x) images with peak log(1 + range_max)"""
    if not range_max > 0:
        raise ValidationError(f"range maximum must be > 0, got {range_max}")
    x_hat, x_star = _pair(x_hat, x_star)
    if (x_hat < 0).any() or (x_star < 0).any():
        raise ValidationError("log PSNR needs nonnegative images")
    return psnr(np.log1p(x_hat), np.log1p(x_star), math.log1p(range_max))


def format_db(value: float) -> str:
    return "inf" if math.isinf(value) else f"{value:.2f}"
