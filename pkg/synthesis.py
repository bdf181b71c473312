#!/usr/bin/env python3
"""
Sparse Synthesis Prior
Intensity transform rho, dictionaries, patch grids and the patch model lambda = H rho(D z)
"""

import logging
import math
from dataclasses import dataclass
from typing import Iterator, List, Tuple

import numpy as np

from errors import DimensionError, PatchShapeError, RankError, ValidationError
from formation import SensingOperator
from tensor_io import read_tensor, write_tensor

logger = logging.getLogger(__name__)

_NORM_TOLERANCE = 1e-12


def rho(x, c: float):
    """c exp(x) for x <= 0, c (1 + x) for x > 0"""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0, c * (1.0 + x), c * np.exp(np.minimum(x, 0.0)))


def rho_prime(x, c: float):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0, c, c * np.exp(np.minimum(x, 0.0)))


def rho_second(x, c: float):
    # x = 0 takes the exponential branch
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0, 0.0, c * np.exp(np.minimum(x, 0.0)))


@dataclass(frozen=True)
class IntensityTransform:
    """Positivity-enforcing hybrid exponential/linear map with scale c"""

    c: float = 10.0

    def __post_init__(self):
        if not (math.isfinite(self.c) and self.c > 0):
            raise ValidationError(f"intensity scale c must be finite and > 0, got {self.c}")

    def __call__(self, x):
        return rho(x, self.c)

    def prime(self, x):
        return rho_prime(x, self.c)

    def second(self, x):
        return rho_second(x, self.c)


@dataclass(frozen=True, eq=False)
class Dictionary:
    """n x m atom matrix for square patches; atoms are unit-norm after construction"""

    atoms: np.ndarray

    def __post_init__(self):
        atoms = np.array(self.atoms, dtype=np.float64)
        if atoms.ndim != 2:
            raise RankError(f"dictionary must be a 2-D matrix, got rank {atoms.ndim}")
        side = math.isqrt(atoms.shape[0])
        if side * side != atoms.shape[0] or side == 0:
            raise PatchShapeError(f"atom length {atoms.shape[0]} is not a perfect square")
        if atoms.shape[1] < 1:
            raise DimensionError("dictionary has no atoms")
        if not np.isfinite(atoms).all():
            raise ValidationError("dictionary contains non-finite entries")

        norms = np.linalg.norm(atoms, axis=0)
        if (norms == 0).any():
            raise ValidationError(f"dictionary has {int((norms == 0).sum())} zero atom(s)")
        off = np.abs(norms - 1.0) > _NORM_TOLERANCE
        if off.any():
            if np.abs(norms[off] - 1.0).max() > 1e-8:
                logger.warning(f"⚠️ Renormalized {int(off.sum())} dictionary atom(s) to unit norm")
            atoms[:, off] /= norms[off]
        atoms.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)

    @property
    def patch_dim(self) -> int:
        return self.atoms.shape[0]

    @property
    def atom_count(self) -> int:
        return self.atoms.shape[1]

    @property
    def patch_side(self) -> int:
        return math.isqrt(self.patch_dim)


def make_dct_dictionary(patch_side: int, atoms_per_axis: int, extra_dc_atom: bool = False) -> Dictionary:
    """Separable (overcomplete) cosine dictionary with atoms_per_axis**2 atoms.

    With atoms_per_axis == patch_side this is the orthonormal 2-D DCT-II basis.
    `extra_dc_atom` appends a second constant atom (e.g. 256 + 1 = 257 atoms).
    """
    if patch_side < 1 or atoms_per_axis < patch_side:
        raise ValidationError(f"need atoms_per_axis >= patch_side >= 1, got {atoms_per_axis} and {patch_side}")
    i = np.arange(patch_side)[:, None]
    k = np.arange(atoms_per_axis)[None, :]
    basis = np.cos(np.pi * (2 * i + 1) * k / (2.0 * atoms_per_axis))
    basis /= np.linalg.norm(basis, axis=0)
    atoms = np.kron(basis, basis)
    if extra_dc_atom:
        atoms = np.hstack([atoms, atoms[:, :1]])
    return Dictionary(atoms)


def load_dictionary(path: str) -> Dictionary:
    """Read an n x m dictionary from a tensor file; atoms are renormalized"""
    return Dictionary(read_tensor(path))


def save_dictionary(dictionary: Dictionary, path: str) -> str:
    return write_tensor(path, dictionary.atoms)


class PatchGrid:
    """Square patch positions over an image; the last position on each axis is clamped to the border"""

    def __init__(self, height: int, width: int, patch_side: int, stride: int):
        if patch_side < 1:
            raise ValidationError(f"patch side must be >= 1, got {patch_side}")
        if stride <= 0 or stride > patch_side:
            raise ValidationError(f"stride must be in [1, {patch_side}], got {stride}")
        if height < patch_side or width < patch_side:
            raise DimensionError(f"{height}x{width} image is smaller than a {patch_side}x{patch_side} patch")
        self.height = height
        self.width = width
        self.patch_side = patch_side
        self.stride = stride
        self.rows = self._axis_positions(height)
        self.cols = self._axis_positions(width)

    def _axis_positions(self, n: int) -> List[int]:
        positions = list(range(0, n - self.patch_side + 1, self.stride))
        if positions[-1] != n - self.patch_side:
            positions.append(n - self.patch_side)
        return positions

    def __len__(self) -> int:
        return len(self.rows) * len(self.cols)

    def origins(self) -> Iterator[Tuple[int, int]]:
        for r in self.rows:
            for c in self.cols:
                yield r, c

    def slices(self, index: int, scale: int = 1) -> Tuple[slice, slice]:
        """Row/column slices of patch `index`; `scale` maps to the sensor grid"""
        r = self.rows[index // len(self.cols)]
        c = self.cols[index % len(self.cols)]
        p = self.patch_side
        return slice(r * scale, (r + p) * scale), slice(c * scale, (c + p) * scale)

    def coverage(self) -> np.ndarray:
        counts = np.zeros((self.height, self.width))
        for index in range(len(self)):
            counts[self.slices(index)] += 1
        return counts


def extract_patches(image, grid: PatchGrid) -> np.ndarray:
    """(P, p, p) array of patches in grid order"""
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (grid.height, grid.width):
        raise DimensionError(f"image {image.shape} does not match grid {(grid.height, grid.width)}")
    return np.stack([image[grid.slices(i)] for i in range(len(grid))])


def aggregate_patches(patches, grid: PatchGrid) -> np.ndarray:
    """Overlap-average patches back into an image"""
    patches = np.asarray(patches, dtype=np.float64)
    p = grid.patch_side
    if patches.shape != (len(grid), p, p):
        raise DimensionError(f"expected {len(grid)} patches of {p}x{p}, got {patches.shape}")
    total = np.zeros((grid.height, grid.width))
    for index, patch in enumerate(patches):
        total[grid.slices(index)] += patch
    return total / grid.coverage()


def synthesize_patch(z, dictionary: Dictionary, c: float) -> np.ndarray:
    """Low-resolution patch rho(D z)"""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (dictionary.atom_count,):
        raise DimensionError(f"code length {z.shape} does not match {dictionary.atom_count} atoms")
    side = dictionary.patch_side
    return rho(dictionary.atoms @ z, c).reshape(side, side)


def lift_to_sensor(patch, op: SensingOperator) -> np.ndarray:
    """Sensor-domain rates H patch"""
    return op.forward(np.asarray(patch, dtype=np.float64))


def synthesize_rates(z, dictionary: Dictionary, op: SensingOperator, c: float) -> np.ndarray:
    return lift_to_sensor(synthesize_patch(z, dictionary, c), op)
