#!/usr/bin/env python3
"""
Reconstruction Solvers
Unregularized ML (projected gradient), ISTA and FISTA with backtracking, and
patch-wise image reconstruction with overlap averaging.
"""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from errors import DimensionError, NumericalError, ValidationError
from formation import SensingOperator
from likelihood import StackLike, as_context, nll, nll_grad, nll_hess_diag
from synthesis import Dictionary, PatchGrid, aggregate_patches, rho, rho_prime, rho_second

logger = logging.getLogger(__name__)

VARIANTS = ("ista", "fista", "fista_step_reset")
METHODS = ("ml", "ista", "fista", "mlnet")

REPORT_COLUMNS = ["iteration", "objective", "best_objective", "step_size", "backtracks", "step_reset", "wall_time"]


@dataclass
class SolverConfig:
    """Parameters of the proximal gradient iterations"""

    mu: float = 0.0
    eta0: float = 1.0
    beta: float = 0.5
    max_iters: int = 2000
    tolerance: float = 1e-8
    variant: str = "fista"
    reset_period: int = 5
    backtracking: bool = True
    max_backtracks: int = 100
    floor: float = 1e-8

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown solver variant '{self.variant}', expected one of {', '.join(VARIANTS)}")
        if not 0 < self.beta < 1:
            raise ValidationError(f"backtracking factor must lie in (0, 1), got {self.beta}")
        if not self.eta0 > 0:
            raise ValidationError(f"initial step must be > 0, got {self.eta0}")
        if self.mu < 0:
            raise ValidationError(f"regularization weight must be >= 0, got {self.mu}")
        if self.max_iters < 0:
            raise ValidationError(f"iteration budget must be >= 0, got {self.max_iters}")
        if self.reset_period < 1:
            raise ValidationError(f"reset period must be >= 1, got {self.reset_period}")
        if self.tolerance < 0:
            raise ValidationError(f"tolerance must be >= 0, got {self.tolerance}")


@dataclass
class SolverReport:
    """Per-iteration trace of a solve; row 0 is the initialization"""

    objective: List[float] = field(default_factory=list)
    best_objective: List[float] = field(default_factory=list)
    step_size: List[float] = field(default_factory=list)
    backtracks: List[int] = field(default_factory=list)
    step_reset: List[bool] = field(default_factory=list)
    wall_time: List[float] = field(default_factory=list)
    converged: bool = False
    solution: Optional[np.ndarray] = None

    @property
    def iterations(self) -> int:
        return max(len(self.objective) - 1, 0)

    def record(self, objective: float, step: float, backtracks: int = 0, reset: bool = False,
               elapsed: float = 0.0):
        best = min(objective, self.best_objective[-1]) if self.best_objective else objective
        self.objective.append(float(objective))
        self.best_objective.append(float(best))
        self.step_size.append(float(step))
        self.backtracks.append(int(backtracks))
        self.step_reset.append(bool(reset))
        self.wall_time.append(float(elapsed))

    def rows(self) -> List[list]:
        return [[t, self.objective[t], self.best_objective[t], self.step_size[t], self.backtracks[t],
                 int(self.step_reset[t]), self.wall_time[t]] for t in range(len(self.objective))]

    @classmethod
    def merge(cls, reports: Sequence["SolverReport"]) -> "SolverReport":
        """Whole-image trace from per-patch traces; finished patches hold their last value"""
        merged = cls(converged=all(r.converged for r in reports))
        length = max((len(r.objective) for r in reports), default=0)
        for t in range(length):
            merged.objective.append(sum(_held(r.objective, t) for r in reports))
            merged.best_objective.append(sum(_held(r.best_objective, t) for r in reports))
            merged.step_size.append(float(np.mean([_held(r.step_size, t) for r in reports])))
            merged.backtracks.append(sum(r.backtracks[t] for r in reports if t < len(r.backtracks)))
            merged.step_reset.append(any(r.step_reset[t] for r in reports if t < len(r.step_reset)))
            merged.wall_time.append(sum(_held(r.wall_time, t) for r in reports))
        return merged


def _held(values: list, t: int):
    return values[min(t, len(values) - 1)]


def shrink(v, theta):
    """Soft thresholding sign(v) * max(|v| - theta, 0)"""
    v = np.asarray(v, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if (theta < 0).any():
        raise ValidationError("shrinkage threshold must be >= 0")
    return np.sign(v) * np.maximum(np.abs(v) - theta, 0.0)


class PatchProblem:
    """Data term l(H rho(D z) | B) for one patch and the sensor region it covers"""

    def __init__(self, data: StackLike, dictionary: Dictionary, op: SensingOperator, c: float):
        self.ctx = as_context(data)
        self.dictionary = dictionary
        self.op = op
        self.c = c
        side = dictionary.patch_side
        expected = op.output_shape((side, side))
        if self.ctx.shape != expected:
            raise DimensionError(f"sensor region {self.ctx.shape} does not match patch rates {expected}")

    @property
    def atom_count(self) -> int:
        return self.dictionary.atom_count

    def _side(self) -> int:
        return self.dictionary.patch_side

    def rates(self, z: np.ndarray) -> np.ndarray:
        side = self._side()
        return self.op.forward(rho(self.dictionary.atoms @ z, self.c).reshape(side, side))

    def value(self, z: np.ndarray) -> float:
        return nll(self.rates(z), self.ctx)

    def objective(self, z: np.ndarray, mu: float) -> float:
        return self.value(z) + mu * float(np.abs(z).sum())

    def gradient(self, z: np.ndarray) -> np.ndarray:
        """D^T diag(rho'(Dz)) H^T grad l(H rho(Dz))"""
        a = self.dictionary.atoms @ z
        side = self._side()
        lam = self.op.forward(rho(a, self.c).reshape(side, side))
        back = self.op.adjoint(nll_grad(lam, self.ctx)).ravel()
        return self.dictionary.atoms.T @ (rho_prime(a, self.c) * back)

    def value_and_gradient(self, z: np.ndarray) -> Tuple[float, np.ndarray]:
        return self.value(z), self.gradient(z)

    def hessian_vector(self, z: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Hessian of the data term at z applied to v"""
        D = self.dictionary.atoms
        side = self._side()
        a = D @ z
        u = D @ v
        lam = self.op.forward(rho(a, self.c).reshape(side, side))
        back = self.op.adjoint(nll_grad(lam, self.ctx)).ravel()
        dlam = self.op.forward((rho_prime(a, self.c) * u).reshape(side, side))
        curvature = self.op.adjoint(nll_hess_diag(lam, self.ctx) * dlam).ravel()
        return D.T @ (rho_second(a, self.c) * u * back + rho_prime(a, self.c) * curvature)


def objective(z, stack: StackLike, dictionary: Dictionary, op: SensingOperator, c: float, mu: float) -> float:
    """l(H rho(Dz) | B) + mu ||z||_1"""
    return PatchProblem(stack, dictionary, op, c).objective(np.asarray(z, dtype=np.float64), mu)


def data_grad(z, stack: StackLike, dictionary: Dictionary, op: SensingOperator, c: float) -> np.ndarray:
    return PatchProblem(stack, dictionary, op, c).gradient(np.asarray(z, dtype=np.float64))


def estimate_lipschitz(problems: Sequence[PatchProblem], z: Optional[np.ndarray] = None,
                       iterations: int = 50, seed: int = 0) -> float:
    """Largest |eigenvalue| of the data-term Hessian at z (default 0) over the given problems"""
    if not problems:
        raise ValidationError("need at least one problem to estimate the Lipschitz constant")
    rng = np.random.default_rng(seed)
    estimate = 0.0
    for problem in problems:
        at = np.zeros(problem.atom_count) if z is None else np.asarray(z, dtype=np.float64)
        v = rng.standard_normal(problem.atom_count)
        v /= np.linalg.norm(v)
        value = 0.0
        for _ in range(iterations):
            w = problem.hessian_vector(at, v)
            norm = np.linalg.norm(w)
            if norm == 0 or not math.isfinite(norm):
                break
            value = norm
            v = w / norm
        estimate = max(estimate, value)
    if not estimate > 0:
        raise NumericalError("Lipschitz estimate is not positive")
    logger.debug(f"Lipschitz estimate {estimate:.6g} over {len(problems)} problem(s)")
    return estimate


def ista_step(lipschitz: float) -> float:
    return 0.9 / lipschitz


def fista_momentum(m: float) -> float:
    return (1.0 + math.sqrt(1.0 + 4.0 * m * m)) / 2.0


def _relative_change(previous: float, current: float) -> float:
    return abs(previous - current) / max(abs(previous), 1e-300)


def _proximal_gradient(problem: PatchProblem, config: SolverConfig, z0: Optional[np.ndarray],
                       accelerated: bool) -> Tuple[np.ndarray, SolverReport]:
    mu = config.mu
    z = np.zeros(problem.atom_count) if z0 is None else np.array(z0, dtype=np.float64)
    if z.shape != (problem.atom_count,):
        raise DimensionError(f"initial code has shape {z.shape}, expected ({problem.atom_count},)")

    report = SolverReport()
    start = time.perf_counter()
    f_z = problem.value(z)
    current = f_z + mu * np.abs(z).sum()
    if not math.isfinite(current):
        raise NumericalError("objective is not finite at the initial code", report=report)
    report.record(current, config.eta0, elapsed=0.0)

    best_z, best = z.copy(), current
    y, f_y = z.copy(), f_z
    m = 1.0
    eta = config.eta0
    reset_variant = config.variant == "fista_step_reset"

    for t in range(1, config.max_iters + 1):
        reset = reset_variant and t % config.reset_period == 0
        if reset:
            eta = config.eta0
        grad = problem.gradient(y)
        count = 0
        while True:
            z_new = shrink(y - eta * grad, mu * eta)
            f_new = problem.value(z_new)
            if not config.backtracking:
                break
            d = z_new - y
            if f_new <= f_y + float(d @ grad) + float(d @ d) / (2.0 * eta):
                break
            eta *= config.beta
            count += 1
            if count > config.max_backtracks:
                logger.error(f"❌ Backtracking exhausted at iteration {t} (step {eta:.3g})")
                report.solution = best_z
                raise NumericalError(f"backtracking did not terminate at iteration {t}", report=report)

        previous = current
        current = f_new + mu * float(np.abs(z_new).sum())
        if not math.isfinite(current):
            report.solution = best_z
            raise NumericalError(f"objective became non-finite at iteration {t}", report=report)

        if accelerated:
            m_next = fista_momentum(m)
            y = z_new + ((m - 1.0) / m_next) * (z_new - z)
            f_y = problem.value(y)
            m = m_next
        else:
            y, f_y = z_new, f_new
        z = z_new
        if current < best:
            best_z, best = z.copy(), current

        report.record(current, eta, count, reset, time.perf_counter() - start)
        if _relative_change(previous, current) < config.tolerance:
            report.converged = True
            break

    logger.debug(f"{'FISTA' if accelerated else 'ISTA'} stopped after {report.iterations} iterations, "
                 f"objective {best:.6g}")
    result = best_z if accelerated else z
    report.solution = result
    return result, report


def solve_ista(stack: StackLike, config: SolverConfig, dictionary: Dictionary, op: SensingOperator, c: float,
               z0: Optional[np.ndarray] = None) -> Tuple[np.ndarray, SolverReport]:
    """ISTA: z <- shrink(z - eta grad, mu eta) with backtracked (or fixed) eta"""
    return _proximal_gradient(PatchProblem(stack, dictionary, op, c), config, z0, accelerated=False)


def solve_fista(stack: StackLike, config: SolverConfig, dictionary: Dictionary, op: SensingOperator, c: float,
                z0: Optional[np.ndarray] = None) -> Tuple[np.ndarray, SolverReport]:
    """FISTA with backtracking; returns the best iterate seen"""
    return _proximal_gradient(PatchProblem(stack, dictionary, op, c), config, z0, accelerated=True)


def solve_ml_unregularized(stack: StackLike, op: SensingOperator, x0=None,
                           config: Optional[SolverConfig] = None, c: float = 10.0) -> Tuple[np.ndarray, SolverReport]:
    """Minimize nll(Hx) over x >= floor by projected gradient with backtracking.

    Starts from the constant image c unless `x0` is given. The step doubles
    before each iteration and is then backtracked, so it can grow well past
    eta0 on flat, high-rate problems.
    """
    config = config or SolverConfig()
    ctx = as_context(stack)
    shape = op.input_shape(ctx.shape)
    if x0 is None and not c > 0:
        raise ValidationError(f"initial intensity c must be > 0, got {c}")
    x = np.full(shape, float(c)) if x0 is None else np.array(x0, dtype=np.float64)
    if x.shape != shape:
        raise DimensionError(f"initial image {x.shape} does not match {shape}")
    if not (x > 0).all():
        raise ValidationError("initial image must be > 0 everywhere")
    x = np.maximum(x, config.floor)

    report = SolverReport()
    start = time.perf_counter()
    current = nll(op.forward(x), ctx)
    if not math.isfinite(current):
        raise NumericalError("objective is not finite at the initial image", report=report)
    report.record(current, config.eta0)
    eta = config.eta0

    for t in range(1, config.max_iters + 1):
        grad = op.adjoint(nll_grad(op.forward(x), ctx))
        eta = eta / config.beta if config.backtracking else config.eta0
        count = 0
        while True:
            x_new = np.maximum(x - eta * grad, config.floor)
            f_new = nll(op.forward(x_new), ctx)
            if not config.backtracking:
                break
            d = x_new - x
            if f_new <= current + float(np.vdot(d, grad)) + float(np.vdot(d, d)) / (2.0 * eta):
                break
            eta *= config.beta
            count += 1
            if count > config.max_backtracks:
                logger.error(f"❌ Backtracking exhausted at iteration {t} (step {eta:.3g})")
                report.solution = x
                raise NumericalError(f"backtracking did not terminate at iteration {t}", report=report)
        if not math.isfinite(f_new):
            report.solution = x
            raise NumericalError(f"objective became non-finite at iteration {t}", report=report)

        previous, current, x = current, f_new, x_new
        report.record(current, eta, count, False, time.perf_counter() - start)
        if _relative_change(previous, current) < config.tolerance:
            report.converged = True
            break

    logger.debug(f"ML solve stopped after {report.iterations} iterations, objective {current:.6g}")
    report.solution = x
    return x, report


def reconstruct_image(stack: StackLike, method: str, op: SensingOperator, c: float = 10.0,
                      config: Optional[SolverConfig] = None, dictionary: Optional[Dictionary] = None,
                      grid: Optional[PatchGrid] = None, params=None,
                      threads: int = 1) -> Tuple[np.ndarray, SolverReport]:
    """Reconstruct the low-resolution exposure from a binary stack.

    `ml` solves the whole image at once; `ista`, `fista` and `mlnet` solve each
    patch of `grid` independently (sensor region = patch x upsampling) and
    overlap-average the patches. Patch results are collected in index order, so
    the output does not depend on `threads`.
    """
    if method not in METHODS:
        raise ValidationError(f"unknown method '{method}', expected one of {', '.join(METHODS)}")
    config = config or SolverConfig()
    ctx = as_context(stack)

    if method == "ml":
        return solve_ml_unregularized(ctx, op, config=config, c=c)

    if method == "mlnet":
        if params is None:
            raise ValidationError("method 'mlnet' needs network parameters")
        from mlnet import mlnet_infer
        op, c, side = params.op, params.c, params.patch_side
    else:
        if dictionary is None:
            raise ValidationError(f"method '{method}' needs a dictionary")
        side = dictionary.patch_side
    height, width = op.input_shape(ctx.shape)
    grid = grid or PatchGrid(height, width, side, side)
    if (grid.height, grid.width, grid.patch_side) != (height, width, side):
        raise DimensionError(f"patch grid {grid.height}x{grid.width}/{grid.patch_side} does not match "
                             f"image {height}x{width} with {side}x{side} patches")
    regions = [ctx.region(*grid.slices(i, scale=op.upsampling)) for i in range(len(grid))]

    def solve_one(index: int) -> Tuple[np.ndarray, SolverReport]:
        try:
            if method == "mlnet":
                return mlnet_infer(params, regions[index])
            problem = PatchProblem(regions[index], dictionary, op, c)
            z, report = _proximal_gradient(problem, config, None, accelerated=(method == "fista"))
            return rho(dictionary.atoms @ z, c).reshape(side, side), report
        except NumericalError as e:
            e.patch_index = index
            raise

    logger.info(f"📊 Reconstructing {len(regions)} patch(es) with {method} on {threads} thread(s)")
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(solve_one, range(len(regions))))
    else:
        results = [solve_one(i) for i in range(len(regions))]

    image = aggregate_patches(np.stack([patch for patch, _ in results]), grid)
    return image, SolverReport.merge([report for _, report in results])
