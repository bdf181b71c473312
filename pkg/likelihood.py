#!/usr/bin/env python3
"""
Binary-Poisson Likelihood
Negative log-likelihood of thresholded Poisson counts and its per-pixel derivatives.

For a pixel with threshold q and rate lam, p = P(N < q) is the regularized upper
incomplete gamma Q(q, lam) and 1 - p is the lower one P(q, lam). Both tails are
taken straight from scipy.special and fall back to a log-space series when the
library value underflows, so log(1 - p) is never formed from a rounded p.
"""

import logging
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np
from scipy.special import gammainc, gammaincc, gammaln, xlogy

from errors import DimensionError, ValidationError
from formation import BinaryFrameStack

logger = logging.getLogger(__name__)

_UNDERFLOW = 1e-250
_SERIES_RTOL = 1e-17
_SERIES_MAX_TERMS = 1_000_000


@dataclass(frozen=True, eq=False)
class PixelLikelihoodContext:
    """Sufficient statistics of a stack: thresholds and (n0, n1) counts per pixel"""

    q: np.ndarray
    n0: np.ndarray
    n1: np.ndarray

    @classmethod
    def from_stack(cls, stack: BinaryFrameStack) -> "PixelLikelihoodContext":
        n0, n1 = stack.counts()
        return cls(stack.threshold_map, n0, n1)

    @property
    def shape(self) -> Tuple[int, ...]:
        return np.shape(self.q)

    @property
    def frames(self) -> int:
        return int(np.max(self.n0 + self.n1)) if np.size(self.q) else 0

    def region(self, rows: slice, cols: slice) -> "PixelLikelihoodContext":
        return PixelLikelihoodContext(self.q[rows, cols], self.n0[rows, cols], self.n1[rows, cols])

    def merged(self, other: "PixelLikelihoodContext") -> "PixelLikelihoodContext":
        """Statistics of the concatenated stacks"""
        if not np.array_equal(self.q, other.q):
            raise ValidationError("cannot merge statistics with different threshold maps")
        return PixelLikelihoodContext(self.q, self.n0 + other.n0, self.n1 + other.n1)


StackLike = Union[BinaryFrameStack, PixelLikelihoodContext]


def as_context(data: StackLike) -> PixelLikelihoodContext:
    if isinstance(data, PixelLikelihoodContext):
        return data
    return PixelLikelihoodContext.from_stack(data)


def _check_rates(lam, shape=None) -> np.ndarray:
    lam = np.asarray(lam, dtype=np.float64)
    if shape is not None and lam.shape != tuple(shape):
        raise DimensionError(f"rate image {lam.shape} does not match stack {tuple(shape)}")
    if np.isnan(lam).any() or (lam < 0).any():
        raise ValidationError("Poisson rates must be >= 0")
    return lam


def _lower_tail_series(q: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """log P(N <= q-1) summed downward from the n = q-1 term (lam > q-1)"""
    total = np.ones_like(lam)
    term = np.ones_like(lam)
    n = (q - 1).astype(np.float64)
    active = n >= 1
    for _ in range(_SERIES_MAX_TERMS):
        if not active.any():
            break
        term = np.where(active, term * n / lam, term)
        total = np.where(active, total + term, total)
        n = n - active
        active &= (n >= 1) & (term >= _SERIES_RTOL * total)
    return -lam + xlogy(q - 1, lam) - gammaln(q) + np.log(total)


def _upper_tail_series(q: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """log P(N >= q) summed upward from the n = q term (lam < q)"""
    total = np.ones_like(lam)
    term = np.ones_like(lam)
    n = q.astype(np.float64)
    active = np.ones(lam.shape, dtype=bool)
    for _ in range(_SERIES_MAX_TERMS):
        if not active.any():
            break
        n = n + 1
        term = np.where(active, term * lam / n, term)
        total = np.where(active, total + term, total)
        active &= term >= _SERIES_RTOL * total
    return -lam + xlogy(q, lam) - gammaln(q + 1) + np.log(total)


def log_tail_probabilities(q, lam) -> Tuple[np.ndarray, np.ndarray]:
    """(log p, log(1 - p)) with p = P(Poisson(lam) < q), each accurate when the other is near 1"""
    q = np.asarray(q, dtype=np.float64)
    lam = _check_rates(lam)
    q, lam = np.broadcast_arrays(q, lam)
    if (q < 1).any():
        raise ValidationError("thresholds must be >= 1")

    p = gammaincc(q, lam)
    sf = gammainc(q, lam)
    with np.errstate(divide="ignore"):
        log_p = np.log(p)
        log_sf = np.log(sf)

    low = (p < _UNDERFLOW) & (lam > 0)
    if low.any():
        log_p[low] = _lower_tail_series(q[low], lam[low])
    high = (sf < _UNDERFLOW) & (lam > 0)
    if high.any():
        log_sf[high] = _upper_tail_series(q[high], lam[high])
    single = q == 1
    if single.any():
        with np.errstate(divide="ignore"):
            log_p = np.where(single, -lam, log_p)
            log_sf = np.where(single, np.log(-np.expm1(-lam)), log_sf)
    log_p = np.where(lam == 0, 0.0, log_p)
    log_sf = np.where(lam == 0, -np.inf, log_sf)
    return log_p, log_sf


def poisson_cdf_below(q, lam):
    """P(N < q) for N ~ Poisson(lam)"""
    lam_arr = np.asarray(lam, dtype=np.float64)
    if (lam_arr < 0).any():
        raise ValidationError("Poisson rate must be >= 0")
    log_p, _ = log_tail_probabilities(q, lam_arr)
    p = np.exp(log_p)
    return float(p) if np.ndim(p) == 0 else p


def _log_pmf(k: np.ndarray, lam: np.ndarray) -> np.ndarray:
    # log P(N = k), -inf for k < 0
    with np.errstate(divide="ignore", invalid="ignore"):
        value = -lam + xlogy(k, lam) - gammaln(k + 1)
    return np.where(k >= 0, value, -np.inf)


def _weighted(counts: np.ndarray, values: np.ndarray) -> np.ndarray:
    # counts * values with 0 * inf := 0
    with np.errstate(invalid="ignore"):
        return np.where(counts > 0, counts * values, 0.0)


def _ratios(ctx: PixelLikelihoodContext, lam: np.ndarray):
    q = np.asarray(ctx.q, dtype=np.float64)
    log_p, log_sf = log_tail_probabilities(q, lam)
    log_g = _log_pmf(q - 1, lam)
    with np.errstate(over="ignore", invalid="ignore"):
        r0 = np.exp(log_g - log_p)
        r1 = np.exp(log_g - log_sf)
    return q, log_p, log_sf, r0, r1


def nll_pixels(lam, data: StackLike) -> np.ndarray:
    """Per-pixel -n0 log p - n1 log(1 - p)"""
    ctx = as_context(data)
    lam = _check_rates(lam, ctx.shape)
    log_p, log_sf = log_tail_probabilities(ctx.q, lam)
    return _weighted(ctx.n0, -log_p) + _weighted(ctx.n1, -log_sf)


def nll(lam, data: StackLike) -> float:
    """Negative log-likelihood of the stack at sensor rates lam (additive constant dropped)"""
    ctx = as_context(data)
    lam = _check_rates(lam, ctx.shape)
    impossible = (lam == 0) & (np.asarray(ctx.n1) > 0)
    if impossible.any():
        logger.warning(f"⚠️ {int(impossible.sum())} pixel(s) observed a 1-bit at zero rate, objective is +inf")
        return float("inf")
    return float(nll_pixels(lam, ctx).sum())


def nll_grad(lam, data: StackLike) -> np.ndarray:
    """Per-pixel d nll / d lam = n0 g/p - n1 g/(1-p), g = P(N = q-1)"""
    ctx = as_context(data)
    lam = _check_rates(lam, ctx.shape)
    _, _, _, r0, r1 = _ratios(ctx, lam)
    return _weighted(ctx.n0, r0) - _weighted(ctx.n1, r1)


def _upper_curvature(q: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """d/dlam of g/(1-p) for lam well below q - 1.

    With 1 - p = g lam/q S and S = 1 + T, T = sum_{k>=1} lam^k q!/(q+k)!, the
    derivative is q ((q-1-lam) T - 1 - lam) / (lam S)^2, free of the
    cancellation in r (q-1)/lam - r - r^2.
    """
    tail = np.zeros_like(lam)
    term = np.ones_like(lam)
    n = q.astype(np.float64)
    active = np.ones(lam.shape, dtype=bool)
    for _ in range(_SERIES_MAX_TERMS):
        if not active.any():
            break
        n = n + 1
        term = np.where(active, term * lam / n, term)
        tail = np.where(active, tail + term, tail)
        active &= term >= _SERIES_RTOL * (1.0 + tail)
    return q * ((q - 1 - lam) * tail - 1 - lam) / (lam * (1.0 + tail)) ** 2


def _lower_curvature(q: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """d/dlam of g/p for lam well above q - 1.

    With p = g (1 + U), U = sum_j a_j and a_j = prod_{i<=j} (q-i)/lam, the
    derivative is sum_j j a_j / (lam (1 + U)^2), a sum of positive terms.
    """
    u = np.zeros_like(lam)
    w = np.zeros_like(lam)
    a = np.ones_like(lam)
    m = (q - 1).astype(np.float64)
    j = 0
    active = m >= 1
    for _ in range(_SERIES_MAX_TERMS):
        if not active.any():
            break
        j += 1
        a = np.where(active, a * m / lam, a)
        u = np.where(active, u + a, u)
        w = np.where(active, w + j * a, w)
        m = m - active
        active &= (m >= 1) & (j * a >= _SERIES_RTOL * w)
    return w / (lam * (1.0 + u) ** 2)


def nll_hess_diag(lam, data: StackLike) -> np.ndarray:
    """Per-pixel second derivative; the Hessian of the separable nll is diagonal"""
    ctx = as_context(data)
    lam = _check_rates(lam, ctx.shape)
    q, log_p, log_sf, r0, r1 = _ratios(ctx, lam)
    # g' = P(N = q-2) - P(N = q-1)
    log_g_prev = _log_pmf(q - 2, lam)
    with np.errstate(over="ignore", invalid="ignore"):
        s0 = np.exp(log_g_prev - log_p)
        s1 = np.exp(log_g_prev - log_sf)
        d_r0 = s0 - r0 + r0 * r0
        d_r1 = s1 - r1 - r1 * r1
    # more than sqrt(q) away from the mode the closed form cancels
    spread = np.sqrt(q)
    upper = (lam > 0) & (q - 1 - lam > spread)
    if upper.any():
        d_r1[upper] = _upper_curvature(q[upper], lam[upper])
    lower = lam - (q - 1) > spread
    if lower.any():
        d_r0[lower] = _lower_curvature(q[lower], lam[lower])
    return _weighted(ctx.n0, d_r0) - _weighted(ctx.n1, d_r1)


def nll_derivatives(lam, data: StackLike) -> Tuple[np.ndarray, np.ndarray]:
    """(gradient, Hessian diagonal) pair used by the network backward pass"""
    ctx = as_context(data)
    return nll_grad(lam, ctx), nll_hess_diag(lam, ctx)
