#!/usr/bin/env python3
"""
MLNet
Unrolled fixed-depth ISTA network with tied layers: forward pass with a layer tape,
hand-derived backward pass, losses, and round-robin SGD training.

Layer t (z_0 = 0 by default):
    b_t = z_{t-1} - W diag(rho'(Q z_{t-1})) H^T grad l(H rho(A z_{t-1}))
    z_t = shrink(b_t, theta)
Output: x_hat = rho(D z_T)
"""

import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import (ConfigError, DimensionError, NumericalError, TrainingDiverged, ValidationError,
                    VersionMismatchError)
from formation import SensingOperator
from likelihood import PixelLikelihoodContext, StackLike, as_context, nll, nll_grad, nll_hess_diag
from solvers import PatchProblem, SolverReport, estimate_lipschitz, ista_step, shrink
from synthesis import Dictionary, rho, rho_prime, rho_second
from tensor_io import read_tensor, write_tensor

logger = logging.getLogger(__name__)

PARAMS_FORMAT_VERSION = 1
TENSOR_NAMES = ("W", "A", "Q", "theta", "D")
LOSS_KINDS = ("mse", "log_mse")
MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True, eq=False)
class MLNetParams:
    """Tied network parameters; A, Q, D are n x m, W is m x n, theta has length m"""

    depth: int
    A: np.ndarray
    Q: np.ndarray
    W: np.ndarray
    theta: np.ndarray
    D: np.ndarray
    op: SensingOperator
    c: float
    round_robin: Tuple[str, ...] = TENSOR_NAMES

    def __post_init__(self):
        if self.depth < 0:
            raise ValidationError(f"network depth must be >= 0, got {self.depth}")
        for name in TENSOR_NAMES:
            value = np.array(getattr(self, name), dtype=np.float64)
            if not np.isfinite(value).all():
                raise ValidationError(f"parameter {name} contains non-finite values")
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        n, m = self.D.shape
        if math.isqrt(n) ** 2 != n:
            raise DimensionError(f"patch dimension {n} is not a perfect square")
        expected = {"A": (n, m), "Q": (n, m), "W": (m, n), "theta": (m,)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise DimensionError(f"parameter {name} has shape {getattr(self, name).shape}, expected {shape}")
        if (self.theta < 0).any():
            raise ValidationError("shrinkage thresholds must be >= 0")
        unknown = set(self.round_robin) - set(TENSOR_NAMES)
        if unknown or not self.round_robin:
            raise ValidationError(f"bad round-robin order {self.round_robin}")
        object.__setattr__(self, "round_robin", tuple(self.round_robin))

    @property
    def patch_dim(self) -> int:
        return self.D.shape[0]

    @property
    def atom_count(self) -> int:
        return self.D.shape[1]

    @property
    def patch_side(self) -> int:
        return math.isqrt(self.patch_dim)

    def tensors(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in TENSOR_NAMES}

    def with_tensor(self, name: str, value: np.ndarray) -> "MLNetParams":
        return replace(self, **{name: value})

    def with_depth(self, depth: int) -> "MLNetParams":
        return replace(self, depth=depth)

    @classmethod
    def ista_init(cls, dictionary: Dictionary, eta: float, mu: float, depth: int, op: SensingOperator,
                  c: float) -> "MLNetParams":
        """A = Q = D, W = eta D^T, theta = mu eta"""
        if not eta > 0 or mu < 0:
            raise ValidationError(f"need eta > 0 and mu >= 0, got eta={eta}, mu={mu}")
        D = dictionary.atoms
        return cls(depth, D, D, eta * D.T, np.full(D.shape[1], mu * eta), D, op, c)


@dataclass
class LayerTape:
    """codes[t] = z_t for t = 0..T, pre_shrink[t - 1] = b_t"""

    codes: List[np.ndarray] = field(default_factory=list)
    pre_shrink: List[np.ndarray] = field(default_factory=list)

    @property
    def depth(self) -> int:
        return len(self.pre_shrink)


@dataclass
class TrainConfig:
    batch_size: int = 100
    learning_rate: float = 0.01
    epochs: int = 20
    order: Tuple[str, ...] = TENSOR_NAMES
    validation_fraction: float = 0.2
    patience: int = 2
    max_decays: int = 4
    decay: float = 0.5
    loss: str = "mse"
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValidationError(f"minibatch size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ValidationError(f"learning rate must be >= 0, got {self.learning_rate}")
        if self.epochs < 0:
            raise ValidationError(f"epoch count must be >= 0, got {self.epochs}")
        if not 0 <= self.validation_fraction < 1:
            raise ValidationError(f"validation fraction must lie in [0, 1), got {self.validation_fraction}")
        if self.loss not in LOSS_KINDS:
            raise ValidationError(f"unknown loss '{self.loss}', expected one of {', '.join(LOSS_KINDS)}")
        if not self.order or set(self.order) - set(TENSOR_NAMES):
            raise ValidationError(f"round-robin order must name tensors from {TENSOR_NAMES}")
        if not 0 < self.decay <= 1:
            raise ValidationError(f"decay factor must lie in (0, 1], got {self.decay}")
        if self.max_decays < 0:
            raise ValidationError(f"decay count must be >= 0, got {self.max_decays}")


@dataclass(frozen=True, eq=False)
class TrainingSample:
    """Ground-truth low-resolution patch and the statistics of its sensor region"""

    target: np.ndarray
    ctx: PixelLikelihoodContext


@dataclass
class LayerGradients:
    W: np.ndarray
    A: np.ndarray
    Q: np.ndarray
    theta: np.ndarray
    code: np.ndarray

    def as_dict(self) -> Dict[str, np.ndarray]:
        return {"W": self.W, "A": self.A, "Q": self.Q, "theta": self.theta}


def shrink_subgradient(b, theta) -> Tuple[np.ndarray, np.ndarray]:
    """(d shrink / d b, d shrink / d theta); ties |b| = theta take the zero branch"""
    b = np.asarray(b, dtype=np.float64)
    active = np.abs(b) > np.asarray(theta, dtype=np.float64)
    return active.astype(np.float64), np.where(active, -np.sign(b), 0.0)


def _layer_terms(params: MLNetParams, ctx: PixelLikelihoodContext, z: np.ndarray):
    side = params.patch_side
    a1 = params.A @ z
    a2 = params.Q @ z
    lam = params.op.forward(rho(a1, params.c).reshape(side, side))
    v = params.op.adjoint(nll_grad(lam, ctx)).ravel()
    s = rho_prime(a2, params.c) * v
    return a1, a2, lam, v, s


def _check_region(params: MLNetParams, ctx: PixelLikelihoodContext):
    side = params.patch_side
    expected = params.op.output_shape((side, side))
    if ctx.shape != expected:
        raise DimensionError(f"sensor region {ctx.shape} does not match network patch rates {expected}")


def mlnet_forward(params: MLNetParams, data: StackLike,
                  z0: Optional[np.ndarray] = None) -> Tuple[np.ndarray, LayerTape]:
    """Run the T layers from z_0 (zero unless given); returns rho(D z_T) as a p x p patch and the tape"""
    ctx = as_context(data)
    _check_region(params, ctx)
    z = np.zeros(params.atom_count) if z0 is None else np.array(z0, dtype=np.float64)
    if z.shape != (params.atom_count,):
        raise DimensionError(f"start code has shape {z.shape}, expected ({params.atom_count},)")
    tape = LayerTape([z])
    for t in range(1, params.depth + 1):
        _, _, _, _, s = _layer_terms(params, ctx, z)
        b = z - params.W @ s
        z = shrink(b, params.theta)
        if not (np.isfinite(b).all() and np.isfinite(z).all()):
            raise NumericalError(f"non-finite activation in layer {t}", layer=t)
        tape.pre_shrink.append(b)
        tape.codes.append(z)
    side = params.patch_side
    return rho(params.D @ z, params.c).reshape(side, side), tape


def mlnet_infer(params: MLNetParams, data: StackLike) -> Tuple[np.ndarray, SolverReport]:
    """Forward pass with a per-layer trace of the data term of rho(D z_t)"""
    ctx = as_context(data)
    _check_region(params, ctx)
    side = params.patch_side
    report = SolverReport()
    start = time.perf_counter()

    def data_term(code):
        return nll(params.op.forward(rho(params.D @ code, params.c).reshape(side, side)), ctx)

    z = np.zeros(params.atom_count)
    report.record(data_term(z), 0.0)
    for t in range(1, params.depth + 1):
        _, _, _, _, s = _layer_terms(params, ctx, z)
        z = shrink(z - params.W @ s, params.theta)
        if not np.isfinite(z).all():
            raise NumericalError(f"non-finite activation in layer {t}", layer=t, report=report)
        report.record(data_term(z), 0.0, elapsed=time.perf_counter() - start)
    report.converged = True
    report.solution = z
    return rho(params.D @ z, params.c).reshape(side, side), report


def _validate_loss_inputs(x_hat, x_star, kind: str) -> Tuple[np.ndarray, np.ndarray]:
    x_hat = np.asarray(x_hat, dtype=np.float64)
    x_star = np.asarray(x_star, dtype=np.float64)
    if x_hat.shape != x_star.shape:
        raise DimensionError(f"reconstruction {x_hat.shape} and target {x_star.shape} differ in shape")
    if kind not in LOSS_KINDS:
        raise ValidationError(f"unknown loss '{kind}'")
    if kind == "log_mse" and ((x_star < 0).any() or (x_hat < 0).any()):
        raise ValidationError("log-domain loss needs nonnegative images")
    return x_hat, x_star


def mlnet_loss(x_hat, x_star, kind: str = "mse") -> float:
    """1/2 ||x* - x_hat||^2, or the same on log(1 + .) intensities"""
    x_hat, x_star = _validate_loss_inputs(x_hat, x_star, kind)
    if kind == "mse":
        return 0.5 * float(np.sum((x_star - x_hat) ** 2))
    return 0.5 * float(np.sum((np.log1p(x_star) - np.log1p(x_hat)) ** 2))


def batch_loss(x_hats: Sequence[np.ndarray], x_stars: Sequence[np.ndarray], kind: str = "mse") -> float:
    """Mean of the per-sample losses"""
    if not len(x_hats):
        raise ValidationError("empty batch")
    return float(np.mean([mlnet_loss(a, b, kind) for a, b in zip(x_hats, x_stars)]))


def loss_gradient(x_hat, x_star, kind: str = "mse") -> np.ndarray:
    """d loss / d x_hat"""
    x_hat, x_star = _validate_loss_inputs(x_hat, x_star, kind)
    if kind == "mse":
        return x_hat - x_star
    return (np.log1p(x_hat) - np.log1p(x_star)) / (1.0 + x_hat)


def output_gradients(params: MLNetParams, tape: LayerTape, x_star, kind: str = "mse") -> Tuple[np.ndarray, np.ndarray]:
    """(dF/dD, dF/dz_T) from the last code on the tape"""
    z_last = tape.codes[-1]
    a = params.D @ z_last
    side = params.patch_side
    x_hat = rho(a, params.c).reshape(side, side)
    upstream = loss_gradient(x_hat, x_star, kind).ravel() * rho_prime(a, params.c)
    return np.outer(upstream, z_last), params.D.T @ upstream


def mlnet_grad_D(params: MLNetParams, tape: LayerTape, x_star, kind: str = "mse") -> np.ndarray:
    """dF/dD = (dF/dx_hat * rho'(D z_T)) z_T^T"""
    return output_gradients(params, tape, x_star, kind)[0]


def mlnet_backward(params: MLNetParams, tape: LayerTape, data: StackLike, dz_last) -> LayerGradients:
    """Adjoint of the forward recursion: gradients of W, A, Q, theta given dF/dz_T.

    Layer intermediates are recomputed from the tape; the likelihood enters
    through its Hessian diagonal only.
    """
    ctx = as_context(data)
    _check_region(params, ctx)
    if tape.depth != params.depth or len(tape.codes) != params.depth + 1:
        raise ValidationError(f"tape of depth {tape.depth} does not match a {params.depth}-layer network")

    side = params.patch_side
    op = params.op
    grads = LayerGradients(np.zeros_like(params.W), np.zeros_like(params.A), np.zeros_like(params.Q),
                           np.zeros_like(params.theta), np.zeros(params.atom_count))
    dz = np.array(dz_last, dtype=np.float64)
    if dz.shape != (params.atom_count,):
        raise DimensionError(f"upstream gradient has shape {dz.shape}, expected ({params.atom_count},)")

    for t in range(params.depth, 0, -1):
        z_prev = tape.codes[t - 1]
        b = tape.pre_shrink[t - 1]
        a1, a2, lam, v, s = _layer_terms(params, ctx, z_prev)

        pass_through, d_theta = shrink_subgradient(b, params.theta)
        db = dz * pass_through
        grads.theta += dz * d_theta

        grads.W -= np.outer(db, s)
        ds = -(params.W.T @ db)

        da2 = ds * v * rho_second(a2, params.c)
        dv = ds * rho_prime(a2, params.c)
        grads.Q += np.outer(da2, z_prev)

        dlam = nll_hess_diag(lam, ctx) * op.forward(dv.reshape(side, side))
        da1 = rho_prime(a1, params.c) * op.adjoint(dlam).ravel()
        grads.A += np.outer(da1, z_prev)

        dz = db + params.Q.T @ da2 + params.A.T @ da1

    grads.code = dz
    return grads


def sample_gradients(params: MLNetParams, sample: TrainingSample, kind: str,
                     wanted: Optional[str] = None) -> Tuple[float, Dict[str, np.ndarray]]:
    """Loss of one sample and the gradient of every tensor (or only `wanted`)"""
    x_hat, tape = mlnet_forward(params, sample.ctx)
    loss = mlnet_loss(x_hat, sample.target, kind)
    dD, dz = output_gradients(params, tape, sample.target, kind)
    grads = {"D": dD}
    if wanted in (None, "W", "A", "Q", "theta"):
        grads.update(mlnet_backward(params, tape, sample.ctx, dz).as_dict())
    return loss, grads


def _map(func, items, threads: int):
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(func, items))
    return [func(item) for item in items]


def evaluate_loss(params: MLNetParams, samples: Sequence[TrainingSample], kind: str = "mse",
                  threads: int = 1) -> float:
    def one(sample):
        return mlnet_loss(mlnet_forward(params, sample.ctx)[0], sample.target, kind)
    return float(np.mean(_map(one, samples, threads)))


def initial_params(samples: Sequence[TrainingSample], dictionary: Dictionary, op: SensingOperator, c: float,
                   mu: float, depth: int, step_samples: int = 16, seed: int = 0) -> MLNetParams:
    """ISTA-initialized network with eta = 0.9 / L estimated at z = 0 on a few samples"""
    if not samples:
        raise ValidationError("need samples to estimate the step size")
    problems = [PatchProblem(s.ctx, dictionary, op, c) for s in samples[:step_samples]]
    eta = ista_step(estimate_lipschitz(problems, seed=seed))
    logger.info(f"✓ ISTA initialization: eta = {eta:.4g}, theta = {mu * eta:.4g}")
    return MLNetParams.ista_init(dictionary, eta, mu, depth, op, c)


def _split(count: int, fraction: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    order = rng.permutation(count)
    n_val = int(round(fraction * count)) if count > 1 else 0
    n_val = min(max(n_val, 1 if fraction > 0 and count > 1 else 0), count - 1)
    return order[n_val:], order[:n_val]


def _relative_step(value: np.ndarray, grad: np.ndarray, rate: float) -> np.ndarray:
    # step length is `rate` times the tensor norm
    g_norm = np.linalg.norm(grad)
    if g_norm == 0 or rate == 0:
        return value
    scale = rate * max(np.linalg.norm(value), 1e-12) / g_norm
    return value - scale * grad


def train_mlnet(samples: Sequence[TrainingSample], init: MLNetParams,
                cfg: TrainConfig) -> Tuple[MLNetParams, List[dict]]:
    """Round-robin minibatch SGD; epoch e updates tensor order[e % len(order)].

    Returns the parameters with the best validation loss and one history row
    per epoch (row 0 holds the initial losses).
    """
    if not samples:
        raise ValidationError("training set is empty")
    rng = np.random.default_rng(cfg.seed)
    train_idx, val_idx = _split(len(samples), cfg.validation_fraction, rng)
    train = [samples[i] for i in train_idx]
    val = [samples[i] for i in val_idx] or train

    params = replace(init, round_robin=tuple(cfg.order))
    history: List[dict] = []
    rate = cfg.learning_rate

    def losses(p: MLNetParams) -> Tuple[float, float]:
        try:
            train_loss = evaluate_loss(p, train, cfg.loss, cfg.threads)
            val_loss = evaluate_loss(p, val, cfg.loss, cfg.threads)
        except NumericalError as e:
            raise TrainingDiverged(f"network diverged: {e}", history=history)
        if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
            raise TrainingDiverged("training loss is not finite", history=history)
        return train_loss, val_loss

    train_loss, val_loss = losses(params)
    history.append({"epoch": 0, "tensor": "-", "train_loss": train_loss, "val_loss": val_loss,
                    "learning_rate": rate})
    best, best_val = params, val_loss
    stale, decays = 0, 0
    logger.info(f"📊 Training on {len(train)} samples, validating on {len(val_idx)}; initial val loss {val_loss:.6g}")

    for epoch in range(1, cfg.epochs + 1):
        tensor = cfg.order[(epoch - 1) % len(cfg.order)]
        order = rng.permutation(len(train))
        for start in range(0, len(order), cfg.batch_size):
            batch = [train[i] for i in order[start:start + cfg.batch_size]]
            try:
                results = _map(lambda s: sample_gradients(params, s, cfg.loss, tensor), batch, cfg.threads)
            except NumericalError as e:
                raise TrainingDiverged(f"network diverged in epoch {epoch}: {e}", history=history)
            grad = sum(g[tensor] for _, g in results) / len(results)
            if not np.isfinite(grad).all():
                raise TrainingDiverged(f"non-finite gradient for {tensor} in epoch {epoch}", history=history)
            updated = _relative_step(getattr(params, tensor), grad, rate)
            if tensor == "theta":
                updated = np.maximum(updated, 0.0)
            params = params.with_tensor(tensor, updated)

        train_loss, val_loss = losses(params)
        history.append({"epoch": epoch, "tensor": tensor, "train_loss": train_loss, "val_loss": val_loss,
                        "learning_rate": rate})
        logger.info(f"Epoch {epoch}/{cfg.epochs} [{tensor}] train {train_loss:.6g}, val {val_loss:.6g}")

        if val_loss < best_val:
            best, best_val, stale = params, val_loss, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                decays += 1
                if decays > cfg.max_decays:
                    logger.info(f"⚠️ Validation loss stalled, stopping after epoch {epoch}")
                    break
                rate *= cfg.decay
                stale = 0
                logger.debug(f"Learning rate decayed to {rate:.3g}")

    logger.info(f"✓ Best validation loss {best_val:.6g} (initial {history[0]['val_loss']:.6g})")
    return best, history


def save_params(params: MLNetParams, directory: str) -> str:
    """Write each tensor as a TensorContainer file next to a JSON manifest"""
    os.makedirs(directory, exist_ok=True)
    for name, value in params.tensors().items():
        write_tensor(os.path.join(directory, f"{name}.btsr"), value)
    manifest = {
        "format_version": PARAMS_FORMAT_VERSION,
        "depth": params.depth,
        "patch_dim": params.patch_dim,
        "atom_count": params.atom_count,
        "c": params.c,
        "operator": params.op.to_dict(),
        "round_robin": list(params.round_robin),
    }
    with open(os.path.join(directory, MANIFEST_NAME), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
    logger.info(f"✓ Network parameters saved to {directory}")
    return directory


def load_params(directory: str) -> MLNetParams:
    path = os.path.join(directory, MANIFEST_NAME)
    if not os.path.exists(path):
        raise ConfigError(f"no network manifest at {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            manifest = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"unreadable network manifest {path}: {e}")
    if manifest.get("format_version") != PARAMS_FORMAT_VERSION:
        raise VersionMismatchError(f"network format version {manifest.get('format_version')} is not supported")
    tensors = {name: read_tensor(os.path.join(directory, f"{name}.btsr")) for name in TENSOR_NAMES}
    params = MLNetParams(
        depth=int(manifest["depth"]),
        op=SensingOperator(**manifest["operator"]),
        c=float(manifest["c"]),
        round_robin=tuple(manifest.get("round_robin", TENSOR_NAMES)),
        **tensors,
    )
    if (params.patch_dim, params.atom_count) != (manifest["patch_dim"], manifest["atom_count"]):
        raise DimensionError(f"tensors in {directory} do not match the manifest dimensions")
    return params
