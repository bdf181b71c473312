#!/usr/bin/env python3
"""
Binary Image Formation
Sensing operator (replication + Gaussian PSF), threshold patterns and Poisson frame sampling
"""

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from errors import DimensionError, MalformedFileError, ValidationError

logger = logging.getLogger(__name__)


def validate_exposure(x, name: str = "exposure image") -> np.ndarray:
    """Return `x` as a float64 2-D array after checking it is a finite nonnegative image"""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or min(x.shape) < 1:
        raise DimensionError(f"{name} must be a non-empty 2-D array, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise ValidationError(f"{name} contains non-finite values")
    if (x < 0).any():
        raise ValidationError(f"{name} contains negative values")
    return x


def gaussian_kernel(sigma: float, truncation: int) -> np.ndarray:
    """Normalized 1-D Gaussian taps on [-ceil(truncation*sigma), ceil(truncation*sigma)]"""
    if sigma == 0:
        return np.ones(1)
    radius = int(math.ceil(truncation * sigma))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    taps = np.exp(-0.5 * (offsets / sigma) ** 2)
    return taps / taps.sum()


@lru_cache(maxsize=64)
def _blur_matrix(n: int, sigma: float, truncation: int) -> sp.csr_matrix:
    # replicate padding: out-of-range taps fold onto the border sample
    taps = gaussian_kernel(sigma, truncation)
    radius = (len(taps) - 1) // 2
    rows, cols, vals = [], [], []
    for k, g in zip(range(-radius, radius + 1), taps):
        idx = np.arange(n)
        rows.append(idx)
        cols.append(np.clip(idx + k, 0, n - 1))
        vals.append(np.full(n, g))
    matrix = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    ).tocsr()
    matrix.sum_duplicates()
    return matrix


@dataclass(frozen=True)
class SensingOperator:
    """H: nearest replication by `upsampling`, then a separable truncated Gaussian blur.

    The operator keeps constants (no intensity rescaling on replication) and
    `sigma = 0` is the delta kernel, so `upsampling = 1, sigma = 0` is the identity.
    """

    upsampling: int = 5
    sigma: float = 3.0
    truncation: int = 4
    boundary: str = "replicate"

    def __post_init__(self):
        if int(self.upsampling) != self.upsampling or self.upsampling < 1:
            raise ValidationError(f"upsampling factor must be an integer >= 1, got {self.upsampling}")
        if not math.isfinite(self.sigma) or self.sigma < 0:
            raise ValidationError(f"gaussian sigma must be finite and >= 0, got {self.sigma}")
        if self.truncation < 1:
            raise ValidationError(f"kernel truncation must be >= 1 sigma, got {self.truncation}")
        if self.boundary != "replicate":
            raise ValidationError(f"unsupported boundary mode '{self.boundary}'")

    def output_shape(self, shape: Tuple[int, int]) -> Tuple[int, int]:
        return shape[0] * self.upsampling, shape[1] * self.upsampling

    def input_shape(self, shape: Tuple[int, int]) -> Tuple[int, int]:
        s = self.upsampling
        if shape[0] % s or shape[1] % s:
            raise DimensionError(f"sensor shape {shape} is not divisible by upsampling factor {s}")
        return shape[0] // s, shape[1] // s

    def _blurs(self, height: int, width: int):
        return (_blur_matrix(height, float(self.sigma), int(self.truncation)),
                _blur_matrix(width, float(self.sigma), int(self.truncation)))

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Linear map x -> Hx for any real 2-D array (no sign check)"""
        s = self.upsampling
        up = np.repeat(np.repeat(x, s, axis=0), s, axis=1)
        if self.sigma == 0:
            return up
        blur_h, blur_w = self._blurs(*up.shape)
        return np.asarray((blur_w @ np.asarray(blur_h @ up).T).T)

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        """Linear map y -> H^T y: transposed blur followed by s x s block sums"""
        s = self.upsampling
        h, w = self.input_shape(y.shape)
        if self.sigma != 0:
            blur_h, blur_w = self._blurs(*y.shape)
            y = np.asarray((blur_w.T @ np.asarray(blur_h.T @ y).T).T)
        return y.reshape(h, s, w, s).sum(axis=(1, 3))

    def to_dict(self) -> dict:
        return {"upsampling": self.upsampling, "sigma": self.sigma,
                "truncation": self.truncation, "boundary": self.boundary}


def apply_sensing_operator(x, op: SensingOperator) -> np.ndarray:
    """Exposure on the sensor, lambda = Hx"""
    return op.forward(validate_exposure(x))


def apply_sensing_adjoint(y, op: SensingOperator) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2:
        raise DimensionError(f"adjoint input must be 2-D, got shape {y.shape}")
    if not np.isfinite(y).all():
        raise ValidationError("adjoint input contains non-finite values")
    return op.adjoint(y)


@dataclass(frozen=True, eq=False)
class ThresholdPattern:
    """Periodic tile of integer comparison thresholds"""

    tile: np.ndarray

    def __post_init__(self):
        tile = np.asarray(self.tile)
        if tile.ndim != 2 or min(tile.shape) < 1:
            raise DimensionError(f"threshold tile must be a non-empty 2-D array, got {tile.shape}")
        if not np.all(np.equal(np.mod(tile, 1), 0)) or (tile < 1).any():
            raise ValidationError("thresholds must be integers >= 1")
        object.__setattr__(self, "tile", tile.astype(np.int64))

    @property
    def tile_height(self) -> int:
        return self.tile.shape[0]

    @property
    def tile_width(self) -> int:
        return self.tile.shape[1]

    def expand(self, height: int, width: int) -> np.ndarray:
        """Per-pixel threshold map: q[i, j] = tile[i mod th, j mod tw]"""
        reps = (-(-height // self.tile_height), -(-width // self.tile_width))
        return np.tile(self.tile, reps)[:height, :width].copy()

    def save(self, path: str) -> str:
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"{self.tile_height} {self.tile_width}\n")
            for row in self.tile:
                f.write(" ".join(str(int(v)) for v in row) + "\n")
        logger.info(f"✓ Pattern {self.tile_height}x{self.tile_width} saved to {path}")
        return path

    @classmethod
    def load(cls, path: str) -> "ThresholdPattern":
        with open(path, "r", encoding="utf-8") as f:
            tokens = f.read().split()
        try:
            values = [int(t) for t in tokens]
        except ValueError as e:
            raise MalformedFileError(f"non-integer entry in pattern file {path}: {e}")
        if len(values) < 2:
            raise MalformedFileError(f"pattern file {path} has no header")
        th, tw = values[:2]
        if th < 1 or tw < 1 or len(values) - 2 != th * tw:
            raise MalformedFileError(f"pattern file {path}: expected {th}x{tw} thresholds, found {len(values) - 2}")
        return cls(np.array(values[2:], dtype=np.int64).reshape(th, tw))


@dataclass(frozen=True, eq=False)
class BinaryFrameStack:
    """K binary frames with the per-pixel threshold map that produced them"""

    bits: np.ndarray
    threshold_map: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        qmap = np.asarray(self.threshold_map)
        if bits.ndim != 3 or qmap.ndim != 2:
            raise DimensionError(f"expected bits (K, H, W) and a 2-D threshold map, got {bits.shape} and {qmap.shape}")
        if bits.shape[1:] != qmap.shape:
            raise DimensionError(f"bit frames {bits.shape[1:]} do not match threshold map {qmap.shape}")
        if bits.size and not np.isin(bits, (0, 1)).all():
            raise ValidationError("bit frames must contain only 0 and 1")
        if (qmap < 1).any():
            raise ValidationError("threshold map entries must be >= 1")
        object.__setattr__(self, "bits", bits.astype(np.uint8))
        object.__setattr__(self, "threshold_map", qmap.astype(np.int64))

    @property
    def frames(self) -> int:
        return self.bits.shape[0]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.threshold_map.shape

    def counts(self) -> Tuple[np.ndarray, np.ndarray]:
        """Per-pixel (n0, n1) counts of zero and one observations"""
        n1 = self.bits.sum(axis=0, dtype=np.int64)
        return self.frames - n1, n1

    def region(self, rows: slice, cols: slice) -> "BinaryFrameStack":
        return BinaryFrameStack(self.bits[:, rows, cols], self.threshold_map[rows, cols])


def frame_rng(seed: int, frame: int) -> np.random.Generator:
    """Independent generator for one frame, derived counter-style from (seed, frame)"""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(frame)]))


def _check_scales(scales) -> Optional[np.ndarray]:
    if scales is None:
        return None
    scales = np.asarray(scales, dtype=np.float64).ravel()
    if not scales.size or not np.isfinite(scales).all() or (scales <= 0).any():
        raise ValidationError(f"exposure scales must be a non-empty list of values > 0, got {scales.tolist()}")
    return scales


def sample_binary_frames(lam, pattern: ThresholdPattern, frames: int, seed: int,
                         first_frame: int = 0, scales: Optional[Sequence[float]] = None) -> BinaryFrameStack:
    """Draw `frames` binary frames: bit = 1 iff Poisson(lambda) >= q.

    Frame k uses its own stream keyed on (seed, first_frame + k), so the first
    K frames of a longer run are identical to a run with K frames. With
    `scales`, each frame counts the photons of one sub-exposure per scale
    (rate scale * lambda) and thresholds their sum, which is Poisson with rate
    sum(scales) * lambda.
    """
    lam = validate_exposure(lam, "sensor rate image")
    if frames < 1:
        raise ValidationError(f"frame count must be >= 1, got {frames}")
    if seed < 0 or first_frame < 0:
        raise ValidationError("seed and first frame index must be nonnegative")
    scales = _check_scales(scales)

    qmap = pattern.expand(*lam.shape)
    bits = np.empty((frames,) + lam.shape, dtype=np.uint8)
    for k in range(frames):
        rng = frame_rng(seed, first_frame + k)
        if scales is None:
            photons = rng.poisson(lam)
        else:
            photons = sum(rng.poisson(scale * lam) for scale in scales)
        bits[k] = photons >= qmap
    logger.debug(f"Sampled {frames} frames of {lam.shape[0]}x{lam.shape[1]}, mean bit {bits.mean():.4f}")
    return BinaryFrameStack(bits, qmap)


def make_uniform_pattern(tile_w: int, tile_h: int, q_min: int, q_max: int,
                         seed: int = 0) -> ThresholdPattern:
    """Spread every level in [q_min, q_max] as evenly as possible over a tile, seeded placement"""
    if q_min < 1 or q_max < q_min:
        raise ValidationError(f"need q_max >= q_min >= 1, got q_min={q_min}, q_max={q_max}")
    if tile_w < 1 or tile_h < 1:
        raise ValidationError(f"tile dimensions must be >= 1, got {tile_h}x{tile_w}")
    levels = q_max - q_min + 1
    cells = tile_w * tile_h
    if cells < levels:
        raise ValidationError(f"{tile_h}x{tile_w} tile cannot hold {levels} threshold levels", required=levels)

    values = np.arange(cells) % levels + q_min
    order = np.random.default_rng(seed).permutation(cells)
    return ThresholdPattern(values[order].reshape(tile_h, tile_w))


def _next_covering_threshold(q: int) -> int:
    # largest q' with q' - 2 sqrt(q') <= q + 2 sqrt(q)
    upper = q + 2.0 * math.sqrt(q)
    candidate = int(math.floor((1.0 + math.sqrt(1.0 + upper)) ** 2))
    while candidate - 2.0 * math.sqrt(candidate) > upper:
        candidate -= 1
    while (candidate + 1) - 2.0 * math.sqrt(candidate + 1) <= upper:
        candidate += 1
    return max(candidate, q + 1)


def covering_thresholds(lam_max: float) -> List[int]:
    """Greedy thresholds whose informative intervals [q - 2 sqrt(q), q + 2 sqrt(q)] chain up to lam_max"""
    if not lam_max > 0:
        raise ValidationError(f"lambda_max must be > 0, got {lam_max}")
    thresholds = [1]
    while thresholds[-1] + 2.0 * math.sqrt(thresholds[-1]) < lam_max:
        thresholds.append(_next_covering_threshold(thresholds[-1]))
    return thresholds


def make_hdr_pattern(lam_max: float, tile_side: int, seed: int = 0) -> ThresholdPattern:
    """HDR tile: covering thresholds for [0, lam_max], surplus cells spread over [0, lam_max / 10]"""
    covering = covering_thresholds(lam_max)
    cells = tile_side * tile_side
    if tile_side < 1 or cells < len(covering):
        required_side = int(math.ceil(math.sqrt(len(covering))))
        raise ValidationError(
            f"{tile_side}x{tile_side} tile holds {max(cells, 0)} cells but {len(covering)} thresholds are "
            f"needed (tile side >= {required_side})", required=len(covering))

    surplus = cells - len(covering)
    values = list(covering)
    if surplus:
        low = covering_thresholds(lam_max / 10.0)
        picks = np.linspace(0, len(low) - 1, surplus).round().astype(int)
        values.extend(low[i] for i in picks)

    logger.debug(f"HDR pattern: {len(covering)} covering thresholds, {surplus} low-range extras")
    order = np.random.default_rng(seed).permutation(cells)
    return ThresholdPattern(np.asarray(values, dtype=np.int64)[order].reshape(tile_side, tile_side))


def stack_exposures(stacks: Sequence[BinaryFrameStack]) -> BinaryFrameStack:
    """Concatenate stacks along the frame axis"""
    if not stacks:
        raise ValidationError("no stacks to concatenate")
    first = stacks[0]
    for other in stacks[1:]:
        if other.shape != first.shape:
            raise DimensionError(f"stack shapes differ: {first.shape} vs {other.shape}")
        if not np.array_equal(other.threshold_map, first.threshold_map):
            raise ValidationError("stacks were produced with different threshold maps")
    if len(stacks) == 1:
        return first
    return BinaryFrameStack(np.concatenate([s.bits for s in stacks], axis=0), first.threshold_map)


def simulate_exposures(x, op: SensingOperator, pattern: ThresholdPattern, frames: int,
                       seed: int, scales: Optional[Sequence[float]] = None) -> BinaryFrameStack:
    """Sense a scene and sample its binary frames, optionally summing sub-exposures per frame"""
    return sample_binary_frames(apply_sensing_operator(x, op), pattern, frames, seed, scales=scales)
