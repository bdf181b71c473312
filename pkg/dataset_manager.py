#!/usr/bin/env python3
"""
Dataset Manager
Training-set directories: paired ground-truth patches and binary sensor stacks
"""

import json
import logging
import os
from typing import Dict, List, Optional

import numpy as np
from tabulate import tabulate

from errors import ConfigError, DimensionError, VersionMismatchError
from formation import BinaryFrameStack
from likelihood import PixelLikelihoodContext
from mlnet import TrainingSample
from tensor_io import read_tensor, write_tensor

logger = logging.getLogger(__name__)

DATASET_FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
TARGETS_FILE = "targets.btsr"
BITS_FILE = "bits.btsr"
THRESHOLDS_FILE = "thresholds.btsr"


class DatasetManager:
    """A dataset directory holds targets (N, p, p), bits (N, K, sp, sp), thresholds (N, sp, sp) and a manifest"""

    def __init__(self, directory: str):
        self.directory = directory
        self.manifest: Optional[Dict] = None

    def _path(self, name: str) -> str:
        return os.path.join(self.directory, name)

    def write_dataset(self, targets: np.ndarray, stacks: List[BinaryFrameStack], info: Dict) -> str:
        """Write a new dataset; `info` is stored in the manifest (generation settings, seeds)"""
        targets = np.asarray(targets, dtype=np.float64)
        if targets.ndim != 3 or len(stacks) != targets.shape[0] or not stacks:
            raise DimensionError(f"need N > 0 targets (N, p, p) and N stacks, got {targets.shape} and {len(stacks)}")
        bits = np.stack([s.bits for s in stacks])
        thresholds = np.stack([s.threshold_map for s in stacks]).astype(np.float64)

        os.makedirs(self.directory, exist_ok=True)
        write_tensor(self._path(TARGETS_FILE), targets)
        write_tensor(self._path(BITS_FILE), bits, kind="bits")
        write_tensor(self._path(THRESHOLDS_FILE), thresholds)
        self.manifest = {
            "format_version": DATASET_FORMAT_VERSION,
            "count": int(targets.shape[0]),
            "patch_side": int(targets.shape[1]),
            "frames": int(bits.shape[1]),
            "sensor_side": int(bits.shape[2]),
            **info,
        }
        with open(self._path(MANIFEST_NAME), "w", encoding="utf-8") as f:
            json.dump(self.manifest, f, indent=2)
        print(f"✓ Dataset with {targets.shape[0]} samples written to {self.directory}")
        return self.directory

    def open_dataset(self) -> Dict:
        """Read and check the manifest"""
        path = self._path(MANIFEST_NAME)
        if not os.path.exists(path):
            raise ConfigError(f"no dataset manifest in {self.directory}")
        with open(path, "r", encoding="utf-8") as f:
            try:
                manifest = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"unreadable dataset manifest {path}: {e}")
        if manifest.get("format_version") != DATASET_FORMAT_VERSION:
            raise VersionMismatchError(f"dataset format version {manifest.get('format_version')} is not supported")
        if not manifest.get("count"):
            raise ConfigError(f"dataset {self.directory} is empty")
        self.manifest = manifest
        logger.debug(f"Opened dataset {self.directory} ({manifest['count']} samples)")
        return manifest

    def load_samples(self) -> List[TrainingSample]:
        """Training samples with per-pixel statistics of each stack"""
        manifest = self.manifest or self.open_dataset()
        targets = read_tensor(self._path(TARGETS_FILE))
        bits = read_tensor(self._path(BITS_FILE))
        thresholds = read_tensor(self._path(THRESHOLDS_FILE)).astype(np.int64)
        count = manifest["count"]
        if targets.shape[0] != count or bits.shape[0] != count or thresholds.shape[0] != count:
            raise DimensionError(f"dataset {self.directory} files disagree with the manifest count {count}")
        if bits.shape[2:] != thresholds.shape[1:]:
            raise DimensionError(f"bit frames {bits.shape[2:]} do not match thresholds {thresholds.shape[1:]}")

        n1 = bits.sum(axis=1, dtype=np.int64)
        frames = bits.shape[1]
        return [TrainingSample(targets[i], PixelLikelihoodContext(thresholds[i], frames - n1[i], n1[i]))
                for i in range(count)]

    def describe(self) -> Dict:
        """Print the manifest as a grid table"""
        manifest = self.manifest or self.open_dataset()
        print(f"\n📁 Dataset {self.directory}:")
        rows = [[key, value] for key, value in manifest.items()]
        print(tabulate(rows, headers=['Key', 'Value'], tablefmt='grid'))
        return manifest
