#!/usr/bin/env python3
"""
Experiment Pipeline
Command implementations behind the jotrecon CLI: simulate, make-pattern, make-dataset, info,
train, reconstruct, psnr, sweep-exposures and sweep-depth.

CSV schemas:
    reconstruct      iteration, objective, best_objective, step_size, backtracks, step_reset, wall_time
    train            epoch, tensor, train_loss, val_loss, learning_rate
    sweep-exposures  K, method, psnr, seeds
    sweep-depth      budget, method, psnr, wall_time
"""

import csv
import json
import logging
import os
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tabulate import tabulate

from config_manager import ExperimentConfig
from dataset_manager import DatasetManager
from errors import ConfigError, FormatError, TrainingDiverged, VersionMismatchError
from excel_exporter import ExcelExporter
from formation import (BinaryFrameStack, SensingOperator, ThresholdPattern, make_hdr_pattern, make_uniform_pattern,
                       simulate_exposures)
from metrics import format_db, log_psnr, psnr
from mlnet import MLNetParams, initial_params, load_params, save_params, train_mlnet
from scenes import SYNTHETIC_PREFIX, load_scene, synthetic_scene
from solvers import METHODS, REPORT_COLUMNS, PatchProblem, SolverReport, estimate_lipschitz, ista_step, \
    reconstruct_image
from synthesis import Dictionary, PatchGrid, extract_patches
from tensor_io import read_tensor, write_display_pgm, write_tensor

logger = logging.getLogger(__name__)

STACK_FORMAT_VERSION = 1
STACK_MANIFEST = "manifest.json"
TRUTH_FILE = "truth.btsr"
RATES_FILE = "rates.btsr"
BITS_FILE = "bits.btsr"
THRESHOLDS_FILE = "thresholds.btsr"

HISTORY_COLUMNS = ["epoch", "tensor", "train_loss", "val_loss", "learning_rate"]
SWEEP_EXPOSURE_COLUMNS = ["K", "method", "psnr", "seeds"]
SWEEP_DEPTH_COLUMNS = ["budget", "method", "psnr", "wall_time"]


def write_csv(path: str, headers: Sequence[str], rows: List[Sequence]) -> str:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as csvfile:
        writer = csv.writer(csvfile)
        writer.writerow(headers)
        writer.writerows(rows)
    logger.info(f"✓ Wrote {len(rows)} row(s) to {path}")
    return path


def _write_tables(cfg: ExperimentConfig, directory: str, stem: str, tables: Dict[str, Dict],
                  xlsx: bool) -> List[str]:
    """One CSV per table, plus a workbook holding all of them when `xlsx`"""
    written = []
    for name, table in tables.items():
        filename = f"{stem}.csv" if len(tables) == 1 else f"{stem}_{name}.csv"
        written.append(write_csv(os.path.join(directory, filename), table["headers"], table["rows"]))
    if xlsx:
        workbook = os.path.join(directory, f"{stem}.xlsx")
        written.append(ExcelExporter().export_tables_to_xlsx(workbook, tables, cfg.to_dict()))
    return written


def _scene(cfg: ExperimentConfig) -> np.ndarray:
    size = cfg.scene_size if cfg.scene.startswith(SYNTHETIC_PREFIX) else None
    return load_scene(cfg.scene, size, cfg.range_max, cfg.hdr_scene)


def _score(cfg: ExperimentConfig, estimate: np.ndarray, truth: np.ndarray) -> float:
    if cfg.log_psnr:
        return log_psnr(estimate, truth, cfg.peak())
    return psnr(estimate, truth, cfg.peak())


# ---------------------------------------------------------------- stack files

def save_stack(directory: str, stack: BinaryFrameStack, manifest: Dict,
               truth: Optional[np.ndarray] = None, rates: Optional[np.ndarray] = None) -> str:
    os.makedirs(directory, exist_ok=True)
    write_tensor(os.path.join(directory, BITS_FILE), stack.bits, kind="bits")
    write_tensor(os.path.join(directory, THRESHOLDS_FILE), stack.threshold_map.astype(np.float64))
    if truth is not None:
        write_tensor(os.path.join(directory, TRUTH_FILE), truth)
    if rates is not None:
        write_tensor(os.path.join(directory, RATES_FILE), rates)
    with open(os.path.join(directory, STACK_MANIFEST), "w", encoding="utf-8") as f:
        json.dump({"format_version": STACK_FORMAT_VERSION, **manifest}, f, indent=2)
    return directory


def load_stack(directory: str) -> Tuple[BinaryFrameStack, Dict]:
    """Binary stack and its manifest from a `simulate` output directory"""
    path = os.path.join(directory, STACK_MANIFEST)
    if not os.path.exists(path):
        raise ConfigError(f"no stack manifest in {directory}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            manifest = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"unreadable stack manifest {path}: {e}")
    if manifest.get("format_version") != STACK_FORMAT_VERSION:
        raise VersionMismatchError(f"stack format version {manifest.get('format_version')} is not supported")
    bits = read_tensor(os.path.join(directory, BITS_FILE))
    qmap = read_tensor(os.path.join(directory, THRESHOLDS_FILE))
    if bits.ndim != 3 or qmap.ndim != 2:
        raise FormatError(f"stack in {directory} has bits of rank {bits.ndim} and thresholds of rank {qmap.ndim}")
    return BinaryFrameStack(bits, qmap.astype(np.int64)), manifest


def load_truth(directory: str) -> Optional[np.ndarray]:
    path = os.path.join(directory, TRUTH_FILE)
    return read_tensor(path) if os.path.exists(path) else None


def _stack_operator(manifest: Dict, cfg: ExperimentConfig) -> SensingOperator:
    if "operator" in manifest:
        return SensingOperator(**manifest["operator"])
    return cfg.sensing_operator()


def _acquire(cfg: ExperimentConfig, scene: np.ndarray, op: SensingOperator, pattern: ThresholdPattern,
             frames: int, seed: int) -> Tuple[BinaryFrameStack, np.ndarray]:
    """Frames of `scene` under the configured sub-exposures, and the total exposure they measure"""
    scales = cfg.scales()
    stack = simulate_exposures(scene, op, pattern, frames, seed, scales if scales != (1.0,) else None)
    return stack, scene if scales == (1.0,) else sum(scales) * scene


# ---------------------------------------------------------------- commands

def cmd_simulate(cfg: ExperimentConfig, output_dir: Optional[str] = None) -> Dict:
    """Scene -> sensor rates -> K binary frames; writes truth, rates, stack, thresholds and manifest"""
    output_dir = output_dir or cfg.output_dir
    op = cfg.sensing_operator()
    pattern = cfg.threshold_pattern()
    stack, truth = _acquire(cfg, _scene(cfg), op, pattern, cfg.frames, cfg.seed)
    rates = op.forward(truth)

    manifest = {
        "seed": cfg.seed,
        "frames": cfg.frames,
        "exposure_scales": list(cfg.scales()),
        "scene": cfg.scene,
        "range_max": cfg.range_max,
        "operator": op.to_dict(),
        "pattern": pattern.tile.tolist(),
        "scene_shape": list(truth.shape),
        "sensor_shape": list(stack.shape),
    }
    save_stack(output_dir, stack, manifest, truth=truth, rates=rates)
    write_display_pgm(os.path.join(output_dir, "truth.pgm"), truth, cfg.peak())

    print(f"\n📊 Simulated {cfg.frames} frame(s) of {stack.shape[0]}x{stack.shape[1]} "
          f"from a {truth.shape[0]}x{truth.shape[1]} scene")
    print(tabulate([["mean rate", f"{rates.mean():.4f}"], ["mean bit", f"{stack.bits.mean():.4f}"],
                    ["seed", cfg.seed], ["output", output_dir]], headers=['Key', 'Value'], tablefmt='grid'))
    return {"stack": stack, "truth": truth, "rates": rates, "manifest": manifest, "directory": output_dir}


def cmd_make_pattern(cfg: ExperimentConfig, kind: str, output: str) -> str:
    """Write a uniform or HDR threshold tile as a pattern file"""
    if kind == "uniform":
        pattern = make_uniform_pattern(cfg.tile, cfg.tile, cfg.q_min, cfg.q_max, cfg.seed)
    elif kind == "hdr":
        pattern = make_hdr_pattern(cfg.range_max, cfg.tile, cfg.seed)
    else:
        raise ConfigError(f"unknown pattern kind '{kind}', expected uniform or hdr")
    levels = np.unique(pattern.tile)
    print(f"📊 {kind} pattern {pattern.tile_height}x{pattern.tile_width}: "
          f"{len(levels)} distinct thresholds in [{levels.min()}, {levels.max()}]")
    return pattern.save(output)


def cmd_make_dataset(cfg: ExperimentConfig, output_dir: str, count: Optional[int] = None,
                     first_scene_seed: int = 1000) -> DatasetManager:
    """Paired (patch, sensor region) samples cut from seeded synthetic scenes.

    Scene j uses seed first_scene_seed + j for both content and frames, so the
    training scenes stay disjoint from the low seeds used for evaluation.
    """
    count = count or cfg.patches
    if count < 1:
        raise ConfigError(f"dataset needs at least one patch, got {count}")
    op = cfg.sensing_operator()
    pattern = cfg.threshold_pattern()
    grid = PatchGrid(cfg.scene_size, cfg.scene_size, cfg.patch_side, cfg.patch_side)

    targets: List[np.ndarray] = []
    stacks: List[BinaryFrameStack] = []
    seeds: List[int] = []
    while len(targets) < count:
        seed = first_scene_seed + len(seeds)
        seeds.append(seed)
        stack, scene = _acquire(cfg, synthetic_scene(cfg.scene_size, cfg.range_max, seed, cfg.hdr_scene), op,
                                pattern, cfg.frames, seed)
        patches = extract_patches(scene, grid)
        for i in range(min(len(grid), count - len(targets))):
            targets.append(patches[i])
            stacks.append(stack.region(*grid.slices(i, scale=op.upsampling)))
        logger.debug(f"Scene {seed}: {len(targets)}/{count} patches")

    info = {
        "operator": op.to_dict(),
        "c": cfg.c,
        "range_max": cfg.range_max,
        "hdr_scene": cfg.hdr_scene,
        "pattern": pattern.tile.tolist(),
        "scene_size": cfg.scene_size,
        "scene_seeds": [seeds[0], seeds[-1]],
        "exposure_scales": list(cfg.scales()),
    }
    manager = DatasetManager(output_dir)
    manager.write_dataset(np.stack(targets), stacks, info)
    return manager


def cmd_info(dataset_dir: str) -> Dict:
    """Print and return the manifest of a dataset directory"""
    return DatasetManager(dataset_dir).describe()


def cmd_train(cfg: ExperimentConfig, dataset_dir: str, output_dir: Optional[str] = None,
              xlsx: bool = False) -> Tuple[MLNetParams, List[dict]]:
    """ISTA-initialized MLNet trained on a dataset; writes best-validation params and the loss history"""
    output_dir = output_dir or cfg.output_dir
    manager = DatasetManager(dataset_dir)
    manifest = manager.open_dataset()
    dictionary = cfg.load_dictionary()
    if dictionary.patch_side != manifest["patch_side"]:
        raise ConfigError(f"dictionary patches are {dictionary.patch_side}x{dictionary.patch_side} but the "
                          f"dataset holds {manifest['patch_side']}x{manifest['patch_side']} patches")
    samples = manager.load_samples()[:cfg.patches]
    op = _stack_operator(manifest, cfg)

    train_cfg = cfg.train_config()
    init = initial_params(samples, dictionary, op, cfg.c, cfg.mu, cfg.depth, seed=cfg.seed)

    history_path = os.path.join(output_dir, "history")
    try:
        params, history = train_mlnet(samples, init, train_cfg)
    except TrainingDiverged as e:
        _write_tables(cfg, output_dir, "history", {"history": _history_table(e.history)}, xlsx)
        logger.error(f"❌ Training diverged; partial history kept in {history_path}.csv")
        raise

    params_dir = cfg.params or os.path.join(output_dir, "params")
    save_params(params, params_dir)
    _write_tables(cfg, output_dir, "history", {"history": _history_table(history)}, xlsx)

    print(f"\n📊 Training history ({len(history) - 1} epoch(s)):")
    print(tabulate([[h["epoch"], h["tensor"], f"{h['train_loss']:.6g}", f"{h['val_loss']:.6g}",
                     f"{h['learning_rate']:.3g}"] for h in history], headers=HISTORY_COLUMNS, tablefmt='grid'))
    return params, history


def _history_table(history: List[dict]) -> Dict:
    return {"headers": HISTORY_COLUMNS, "rows": [[h[c] for c in HISTORY_COLUMNS] for h in history]}


def _reconstruct(cfg: ExperimentConfig, stack: BinaryFrameStack, op: SensingOperator, method: str,
                 budget: Optional[int] = None, dictionary: Optional[Dictionary] = None,
                 params: Optional[MLNetParams] = None) -> Tuple[np.ndarray, SolverReport]:
    if method == "mlnet":
        params = params or _load_network(cfg)
        if params.op != op:
            raise ConfigError(f"network was trained for operator {params.op.to_dict()}, "
                              f"stack uses {op.to_dict()}")
        if budget is not None:
            params = params.with_depth(budget)
        height, width = op.input_shape(stack.shape)
        grid = PatchGrid(height, width, params.patch_side, cfg.stride)
        return reconstruct_image(stack, method, op, params=params, grid=grid, threads=cfg.threads)

    config = cfg.solver_config(max_iters=budget)
    if method == "ml":
        return reconstruct_image(stack, method, op, c=cfg.c, config=config, threads=cfg.threads)
    dictionary = dictionary or cfg.load_dictionary()
    height, width = op.input_shape(stack.shape)
    grid = PatchGrid(height, width, dictionary.patch_side, cfg.stride)
    return reconstruct_image(stack, method, op, c=cfg.c, config=config, dictionary=dictionary, grid=grid,
                             threads=cfg.threads)


def _load_network(cfg: ExperimentConfig) -> MLNetParams:
    if not cfg.params:
        raise ConfigError("method 'mlnet' needs 'params' (a trained network directory)")
    return load_params(cfg.params)


def cmd_reconstruct(cfg: ExperimentConfig, stack_dir: str, method: Optional[str] = None,
                    budget: Optional[int] = None, output_dir: Optional[str] = None,
                    xlsx: bool = False) -> Dict:
    """Reconstruct the exposure image of a stack; `budget` is iterations, or layers for mlnet"""
    method = method or cfg.method
    if method not in METHODS:
        raise ConfigError(f"unknown method '{method}', expected one of {', '.join(METHODS)}")
    output_dir = output_dir or cfg.output_dir
    stack, manifest = load_stack(stack_dir)
    op = _stack_operator(manifest, cfg)

    image, report = _reconstruct(cfg, stack, op, method, budget)

    write_tensor(os.path.join(output_dir, f"recon_{method}.btsr"), image)
    write_display_pgm(os.path.join(output_dir, f"recon_{method}.pgm"), image, cfg.peak())
    _write_tables(cfg, output_dir, f"report_{method}",
                  {"report": {"headers": REPORT_COLUMNS, "rows": report.rows()}}, xlsx)

    result = {"image": image, "report": report, "psnr": None}
    truth = load_truth(stack_dir)
    summary = [["method", method], ["iterations", report.iterations], ["converged", report.converged]]
    if report.objective:
        summary.append(["final objective", f"{report.objective[-1]:.6g}"])
    if truth is not None and truth.shape == image.shape:
        result["psnr"] = _score(cfg, image, truth)
        summary.append(["log-PSNR (dB)" if cfg.log_psnr else "PSNR (dB)", format_db(result["psnr"])])
    print(f"\n📊 Reconstruction of {stack_dir}:")
    print(tabulate(summary, headers=['Key', 'Value'], tablefmt='grid'))
    return result


def _read_image(path: str, range_max: float) -> np.ndarray:
    return load_scene(path, None, range_max)


def cmd_psnr(cfg: ExperimentConfig, estimate: str, reference: str) -> float:
    """PSNR (or log-PSNR) of two image files with the configured peak"""
    value = _score(cfg, _read_image(estimate, cfg.peak()), _read_image(reference, cfg.peak()))
    label = "log-PSNR" if cfg.log_psnr else "PSNR"
    print(f"📊 {label}: {format_db(value)} dB")
    return value


def dedupe_counts(counts: Sequence[int]) -> List[int]:
    unique = sorted(set(int(k) for k in counts))
    if len(unique) != len(counts):
        logger.warning(f"⚠️ Duplicate exposure counts removed: {list(counts)} -> {unique}")
    if not unique or unique[0] < 1:
        raise ConfigError(f"exposure counts must be >= 1, got {list(counts)}")
    return unique


def cmd_sweep_exposures(cfg: ExperimentConfig, counts: Sequence[int], methods: Optional[Sequence[str]] = None,
                        seeds: int = 1, output_dir: Optional[str] = None, xlsx: bool = False) -> List[list]:
    """PSNR against the number of exposures K, averaged over `seeds` acquisitions of one scene.

    Frames are drawn once per seed for the largest K; each smaller K uses a
    prefix of them, which matches a run with exactly K frames.
    """
    counts = dedupe_counts(counts)
    methods = list(dict.fromkeys(methods or ["ml", cfg.method]))
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ConfigError(f"unknown method(s) {', '.join(sorted(unknown))}")
    if seeds < 1:
        raise ConfigError(f"seed count must be >= 1, got {seeds}")
    output_dir = output_dir or cfg.output_dir

    scene = _scene(cfg)
    op = cfg.sensing_operator()
    pattern = cfg.threshold_pattern()
    dictionary = cfg.load_dictionary() if set(methods) & {"ista", "fista"} else None
    params = _load_network(cfg) if "mlnet" in methods else None

    scores = {(k, m): [] for k in counts for m in methods}
    for s in range(seeds):
        full, truth = _acquire(cfg, scene, op, pattern, counts[-1], cfg.seed + s)
        for k in counts:
            stack = BinaryFrameStack(full.bits[:k], full.threshold_map)
            for method in methods:
                image, _ = _reconstruct(cfg, stack, op, method, dictionary=dictionary, params=params)
                scores[(k, method)].append(_score(cfg, image, truth))
                logger.info(f"K={k} {method} seed {cfg.seed + s}: {format_db(scores[(k, method)][-1])} dB")

    rows = [[k, m, float(np.mean(scores[(k, m)])), seeds] for k in counts for m in methods]
    _write_tables(cfg, output_dir, "sweep_exposures", {"exposures": {"headers": SWEEP_EXPOSURE_COLUMNS,
                                                                     "rows": rows}}, xlsx)
    print("\n📊 Exposure sweep:")
    print(tabulate([[k, m, format_db(p), n] for k, m, p, n in rows], headers=SWEEP_EXPOSURE_COLUMNS,
                   tablefmt='grid'))
    return rows


def _untrained_network(cfg: ExperimentConfig, stack: BinaryFrameStack, op: SensingOperator,
                       dictionary: Dictionary, depth: int) -> MLNetParams:
    height, width = op.input_shape(stack.shape)
    grid = PatchGrid(height, width, dictionary.patch_side, dictionary.patch_side)
    problems = [PatchProblem(stack.region(*grid.slices(i, scale=op.upsampling)), dictionary, op, cfg.c)
              for i in range(min(len(grid), 16))]
    eta = ista_step(estimate_lipschitz(problems, seed=cfg.seed))
    return MLNetParams.ista_init(dictionary, eta, cfg.mu, depth, op, cfg.c)


def cmd_sweep_depth(cfg: ExperimentConfig, budgets: Sequence[int], output_dir: Optional[str] = None,
                    xlsx: bool = False) -> List[list]:
    """Quality against computational budget: ISTA and FISTA iterations, MLNet layers, ML reference"""
    budgets = sorted(set(int(b) for b in budgets))
    if not budgets or budgets[0] < 0:
        raise ConfigError(f"budgets must be >= 0, got {list(budgets)}")
    output_dir = output_dir or cfg.output_dir

    op = cfg.sensing_operator()
    stack, truth = _acquire(cfg, _scene(cfg), op, cfg.threshold_pattern(), cfg.frames, cfg.seed)
    dictionary = cfg.load_dictionary()
    untrained = _untrained_network(cfg, stack, op, dictionary, budgets[0])
    trained = load_params(cfg.params) if cfg.params else None

    rows = []

    def run(budget: int, label: str, method: str, params: Optional[MLNetParams] = None):
        image, report = _reconstruct(cfg, stack, op, method, budget, dictionary=dictionary, params=params)
        wall = report.wall_time[-1] if report.wall_time else 0.0
        rows.append([budget, label, _score(cfg, image, truth), wall])
        logger.info(f"{label} @ {budget}: {format_db(rows[-1][2])} dB in {wall:.3f}s")

    for budget in budgets:
        run(budget, "ista", "ista")
        run(budget, "fista", "fista")
        run(budget, "mlnet_untrained", "mlnet", untrained)
        if trained is not None:
            run(budget, "mlnet_trained", "mlnet", trained)
    run(cfg.max_iters, "ml", "ml")

    _write_tables(cfg, output_dir, "sweep_depth", {"depth": {"headers": SWEEP_DEPTH_COLUMNS, "rows": rows}}, xlsx)
    print("\n📊 Budget sweep:")
    print(tabulate([[b, m, format_db(p), f"{w:.3f}"] for b, m, p, w in rows], headers=SWEEP_DEPTH_COLUMNS,
                   tablefmt='grid'))
    return rows
