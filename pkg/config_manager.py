#!/usr/bin/env python3
"""
Configuration Manager
Experiment configuration (key = value files plus overrides) and saved presets
"""

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, fields
from datetime import datetime
from typing import Dict, List, Optional, Tuple

import inquirer
from tabulate import tabulate

from errors import ConfigError, JotReconError
from formation import SensingOperator, ThresholdPattern, make_hdr_pattern, make_uniform_pattern
from mlnet import TENSOR_NAMES, TrainConfig
from solvers import SolverConfig
from synthesis import Dictionary, load_dictionary, make_dct_dictionary

logger = logging.getLogger(__name__)

HOME_ENV = "JOTRECON_HOME"
THREADS_ENV = "JOTRECON_THREADS"

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass
class ExperimentConfig:
    """Every knob of a simulate / reconstruct / train run"""

    # scene
    scene: str = "synthetic:1"
    scene_size: int = 64
    range_max: float = 10.0
    hdr_scene: bool = False
    # acquisition
    upsampling: int = 5
    sigma: float = 3.0
    truncation: int = 4
    pattern: str = "uniform"
    tile: int = 5
    q_min: int = 1
    q_max: int = 10
    frames: int = 4
    exposure_scales: str = "1"
    seed: int = 0
    # prior and solver
    c: float = 10.0
    mu: float = 4.0
    method: str = "fista"
    variant: str = "fista"
    max_iters: int = 200
    eta0: float = 1.0
    beta: float = 0.5
    tolerance: float = 1e-8
    reset_period: int = 5
    backtracking: bool = True
    patch_side: int = 8
    stride: int = 8
    atoms_per_axis: int = 16
    extra_dc_atom: bool = False
    dictionary: str = ""
    # network
    params: str = ""
    depth: int = 4
    loss: str = "mse"
    batch_size: int = 100
    learning_rate: float = 0.01
    epochs: int = 20
    validation_fraction: float = 0.2
    patience: int = 2
    train_order: str = "W,A,Q,theta,D"
    decay: float = 0.5
    max_decays: int = 4
    patches: int = 2000
    # output
    log_psnr: bool = False
    threads: int = 1
    output_dir: str = "output"

    @classmethod
    def field_names(cls) -> List[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_file(cls, path: str, **base) -> "ExperimentConfig":
        """`base` values, then the file on top"""
        config = cls(**base)
        config.apply_overrides(read_config_file(path))
        return config

    def apply_overrides(self, values: Dict[str, object]) -> "ExperimentConfig":
        """Set fields from strings or typed values; unknown keys are errors"""
        types = {f.name: f.type for f in fields(self)}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"unknown configuration key '{key}'")
            setattr(self, key, _coerce(key, raw, types[key]))
        return self

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)

    def save(self, path: str) -> str:
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"# jotrecon experiment configuration, written {datetime.now().isoformat(timespec='seconds')}\n")
            for key, value in self.to_dict().items():
                f.write(f"{key} = {str(value).lower() if isinstance(value, bool) else value}\n")
        logger.info(f"✓ Configuration written to {path}")
        return path

    def sensing_operator(self) -> SensingOperator:
        return _wrap(lambda: SensingOperator(self.upsampling, self.sigma, self.truncation))

    def threshold_pattern(self) -> ThresholdPattern:
        """uniform | hdr | path of a pattern file"""
        if self.pattern == "uniform":
            return _wrap(lambda: make_uniform_pattern(self.tile, self.tile, self.q_min, self.q_max, self.seed))
        if self.pattern == "hdr":
            return _wrap(lambda: make_hdr_pattern(self.range_max, self.tile, self.seed))
        if not os.path.exists(self.pattern):
            raise ConfigError(f"pattern file not found: {self.pattern}")
        return ThresholdPattern.load(self.pattern)

    def solver_config(self, max_iters: Optional[int] = None) -> SolverConfig:
        return _wrap(lambda: SolverConfig(
            mu=self.mu, eta0=self.eta0, beta=self.beta,
            max_iters=self.max_iters if max_iters is None else max_iters,
            tolerance=self.tolerance, variant=self.variant, reset_period=self.reset_period,
            backtracking=self.backtracking))

    def scales(self) -> Tuple[float, ...]:
        """Sub-exposure scales summed into every frame, from `exposure_scales = 0.5, 2`"""
        try:
            values = tuple(float(part) for part in self.exposure_scales.split(","))
        except ValueError:
            raise ConfigError(f"exposure_scales must be comma-separated numbers, got '{self.exposure_scales}'")
        if not all(math.isfinite(v) and v > 0 for v in values):
            raise ConfigError(f"exposure scales must be > 0, got '{self.exposure_scales}'")
        return values

    def tensor_order(self) -> Tuple[str, ...]:
        """Round-robin training order, from `train_order = W, A, Q, theta, D`"""
        names = tuple(part.strip() for part in self.train_order.split(",") if part.strip())
        unknown = [name for name in names if name not in TENSOR_NAMES]
        if unknown or not names:
            raise ConfigError(f"train_order must list tensors from {', '.join(TENSOR_NAMES)}, got '{self.train_order}'")
        return names

    def train_config(self) -> TrainConfig:
        return _wrap(lambda: TrainConfig(
            batch_size=self.batch_size, learning_rate=self.learning_rate, epochs=self.epochs,
            order=self.tensor_order(), validation_fraction=self.validation_fraction, patience=self.patience,
            max_decays=self.max_decays, decay=self.decay, loss=self.loss, seed=self.seed, threads=self.threads))

    def load_dictionary(self) -> Dictionary:
        if self.dictionary:
            if not os.path.exists(self.dictionary):
                raise ConfigError(f"dictionary file not found: {self.dictionary}")
            return load_dictionary(self.dictionary)
        return _wrap(lambda: make_dct_dictionary(self.patch_side, self.atoms_per_axis, self.extra_dc_atom))

    def peak(self) -> float:
        """Largest exposure a stack measures: range_max times the summed sub-exposures"""
        return self.range_max * sum(self.scales())


def _wrap(build):
    # constructor validation errors surface as configuration errors
    try:
        return build()
    except ConfigError:
        raise
    except JotReconError as e:
        raise ConfigError(str(e))


def _coerce(key: str, raw, kind):
    kind = kind if isinstance(kind, type) else {"int": int, "float": float, "bool": bool, "str": str}.get(kind, str)
    if not isinstance(raw, str):
        try:
            return kind(raw)
        except (TypeError, ValueError):
            raise ConfigError(f"bad value {raw!r} for '{key}'")
    text = raw.strip()
    try:
        if kind is bool:
            if text.lower() in _TRUE:
                return True
            if text.lower() in _FALSE:
                return False
            raise ValueError(text)
        if kind is int:
            try:
                return int(text)
            except ValueError:
                number = float(text)
                if not number.is_integer():
                    raise
                return int(number)
        if kind is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value '{text}' for '{key}' (expected {kind.__name__})")
    return text


def read_config_file(path: str) -> Dict[str, str]:
    """Flat `key = value` lines; `#` starts a comment"""
    if not os.path.exists(path):
        raise ConfigError(f"configuration file not found: {path}")
    values = {}
    with open(path, "r", encoding="utf-8") as f:
        for number, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{number}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if not key:
                raise ConfigError(f"{path}:{number}: empty key")
            values[key] = value
    return values


def parse_overrides(items: Optional[List[str]]) -> Dict[str, str]:
    """`--set key=value` arguments"""
    values = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not key=value")
        key, value = item.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(int(raw), 1)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got '{raw}'")


class ConfigManager:
    """Named experiment presets stored as JSON in ~/.jotrecon (or $JOTRECON_HOME)"""

    def __init__(self, config_dir: Optional[str] = None):
        self.config_dir = config_dir or os.environ.get(HOME_ENV) or os.path.expanduser("~/.jotrecon")
        self.config_file = os.path.join(self.config_dir, "saved_configs.json")
        self._ensure_config_dir()

    def _ensure_config_dir(self):
        """Ensure config directory exists"""
        os.makedirs(self.config_dir, exist_ok=True)

    def save_config(self, config_name: str, config: Dict) -> bool:
        """Save a preset under `config_name`"""
        unknown = set(config) - set(ExperimentConfig.field_names())
        if unknown:
            raise ConfigError(f"unknown configuration keys: {', '.join(sorted(unknown))}")
        saved_configs = self.load_all_configs()
        saved_configs[config_name] = {
            **config,
            'saved_at': datetime.now().isoformat(),
            'description': f"Config saved on {datetime.now().strftime('%Y-%m-%d %H:%M')}"
        }
        with open(self.config_file, 'w') as f:
            json.dump(saved_configs, f, indent=2)
        print(f"✓ Configuration '{config_name}' saved successfully")
        return True

    def load_all_configs(self) -> Dict:
        """Load all saved presets"""
        if not os.path.exists(self.config_file):
            return {}
        try:
            with open(self.config_file, 'r') as f:
                return json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"preset file {self.config_file} is corrupt: {e}")

    def load_config(self, config_name: str) -> Optional[Dict]:
        return self.load_all_configs().get(config_name)

    def preset_values(self, config_name: str) -> Dict:
        """Stored field values of a preset, without bookkeeping keys"""
        config = self.load_config(config_name)
        if config is None:
            raise ConfigError(f"no saved configuration named '{config_name}'")
        return {k: v for k, v in config.items() if k not in ('saved_at', 'description')}

    def delete_config(self, config_name: str) -> bool:
        saved_configs = self.load_all_configs()
        if config_name not in saved_configs:
            print(f"❌ Configuration '{config_name}' not found")
            return False
        del saved_configs[config_name]
        with open(self.config_file, 'w') as f:
            json.dump(saved_configs, f, indent=2)
        print(f"✓ Configuration '{config_name}' deleted")
        return True

    def confirm(self, message: str) -> bool:
        answers = inquirer.prompt([inquirer.Confirm('confirm', message=message, default=False)])
        return bool(answers and answers['confirm'])

    def delete_config_interactive(self, config_name: str, assume_yes: bool = False) -> bool:
        """Ask before deleting unless `assume_yes`"""
        if config_name not in self.load_all_configs():
            print(f"❌ Configuration '{config_name}' not found")
            return False
        if not assume_yes and not self.confirm(f"Are you sure you want to delete '{config_name}'?"):
            print("❌ Configuration not deleted")
            return False
        return self.delete_config(config_name)

    def list_saved_configs(self) -> List[str]:
        """Print all presets as a grid table"""
        saved_configs = self.load_all_configs()
        if not saved_configs:
            print("📁 No saved configurations found")
            return []

        print(f"\n📁 Saved Configurations ({len(saved_configs)}):")
        print("=" * 60)
        config_data = []
        for name, config in saved_configs.items():
            saved_at = config.get('saved_at', 'Unknown')
            try:
                saved_at = datetime.fromisoformat(saved_at).strftime('%Y-%m-%d %H:%M')
            except (TypeError, ValueError):
                pass
            config_data.append([
                name,
                config.get('scene', 'default'),
                config.get('pattern', 'default'),
                config.get('frames', 'default'),
                config.get('method', 'default'),
                config.get('mu', 'default'),
                saved_at
            ])
        headers = ['Name', 'Scene', 'Pattern', 'K', 'Method', 'mu', 'Saved At']
        print(tabulate(config_data, headers=headers, tablefmt='grid'))
        return list(saved_configs.keys())

    def show_config(self, config_name: str) -> Dict:
        values = self.preset_values(config_name)
        print(f"\n📁 Configuration '{config_name}':")
        print(tabulate(sorted(values.items()), headers=['Key', 'Value'], tablefmt='grid'))
        return values
