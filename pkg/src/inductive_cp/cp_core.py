"""Weighted quantiles, prediction sets and exact coverage laws.

Scores follow the conformity orientation used throughout the package:
higher means the label agrees better with the node. A prediction set keeps
every label whose score reaches the calibrated threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, NamedTuple

import numpy as np


class InsufficientCalibrationMass(ValueError):
    """No cumulative weight fraction reaches the requested level."""


class DegenerateLaw(ValueError):
    """The requested coverage law is undefined for these parameters."""


class WeightedSample(NamedTuple):
    score: float
    weight: float = 1.0


def _as_arrays(scores, weights) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=float).ravel()
    if weights is None:
        w = np.ones_like(s)
    else:
        w = np.asarray(weights, dtype=float).ravel()
    if s.size == 0:
        raise ValueError("weighted quantile of an empty sample")
    if w.shape != s.shape:
        raise ValueError(f"{w.size} weights for {s.size} scores")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValueError("weights must be finite and nonnegative")
    if np.any(np.isnan(s)):
        raise ValueError("scores must not be NaN")
    return s, w


def weighted_quantile(scores, alpha: float, weights=None, prior_weight: float = 1.0) -> float:
    """Smallest sorted score whose cumulative weight fraction reaches ``alpha``.

    The fraction after the i-th smallest score is
    ``sum(w[:i]) / (sum(w) + prior_weight)``. ``prior_weight`` is the mass
    reserved for the unseen test point (1 in the usual split setting).

    Ties in score keep their input order (stable sort).

    Raises
    ------
    InsufficientCalibrationMass
        If even the full fraction stays below ``alpha``.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    s, w = _as_arrays(scores, weights)
    if w.sum() <= 0:
        raise ValueError("total weight must be positive")
    order = np.argsort(s, kind="stable")
    cum = np.cumsum(w[order])
    frac = cum / (cum[-1] + prior_weight)
    hit = np.flatnonzero(frac >= alpha)
    if hit.size == 0:
        raise InsufficientCalibrationMass(
            f"cumulative fraction {frac[-1]:.4g} never reaches {alpha:.4g}"
        )
    return float(s[order[hit[0]]])


def conformal_threshold(cal_scores, alpha: float, weights=None) -> float:
    """Calibrated threshold for conformity scores at miscoverage ``alpha``.

    Negating the scores turns them into nonconformity values; the threshold is
    the negated weighted quantile of those at level ``1 - alpha``. With unit
    weights this picks the ``ceil((n + 1)(1 - alpha))``-th largest calibration
    score, so a fresh exchangeable score clears it with probability at least
    ``1 - alpha``.
    """
    s = np.asarray(cal_scores, dtype=float)
    return -weighted_quantile(-s, 1.0 - alpha, weights)


def prediction_set(label_scores: Mapping | Iterable[float], q: float) -> frozenset:
    """Labels whose score is at least ``q`` (inclusive)."""
    if isinstance(q, float) and math.isnan(q):
        raise ValueError("threshold is NaN")
    if isinstance(label_scores, Mapping):
        return frozenset(y for y, s in label_scores.items() if s >= q)
    arr = np.asarray(label_scores, dtype=float)
    return frozenset(np.flatnonzero(arr >= q).tolist())


# --- coverage laws -----------------------------------------------------------


def _log_comb(n: int, k: int) -> float:
    return math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)


def hypergeom_cdf(k: int, pop: int, draws: int, successes: int) -> float:
    """P(X <= k) for X ~ Hypergeometric(pop, draws, successes).

    Each pmf term is built from log-gamma values; the shorter tail is summed
    and complemented when that is cheaper.
    """
    if pop < 0 or draws < 0 or successes < 0:
        raise ValueError("hypergeometric parameters must be nonnegative")
    if draws > pop or successes > pop:
        raise ValueError(f"draws={draws}, successes={successes} exceed pop={pop}")
    lo = max(0, draws + successes - pop)
    hi = min(draws, successes)
    if k < lo:
        return 0.0
    if k >= hi:
        return 1.0
    log_norm = _log_comb(pop, draws)

    def pmf(i: int) -> float:
        return math.exp(
            _log_comb(successes, i) + _log_comb(pop - successes, draws - i) - log_norm
        )

    if k - lo <= hi - k:
        total = math.fsum(pmf(i) for i in range(lo, k + 1))
    else:
        total = 1.0 - math.fsum(pmf(i) for i in range(k + 1, hi + 1))
    return min(1.0, max(0.0, total))


@dataclass(frozen=True)
class CoverageLawParams:
    n_cal: int
    m_eval: int
    alpha: float

    def __post_init__(self):
        if self.n_cal < 1 or self.m_eval < 1:
            raise ValueError("n_cal and m_eval must be positive")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")

    @property
    def i_alpha(self) -> int:
        # descending rank of the calibration score used as threshold
        return math.ceil((self.n_cal + 1) * (1.0 - self.alpha) - 1e-12)


def transductive_coverage_law(params: CoverageLawParams, t: float) -> float:
    """P(Cov <= t) for a fixed population split into calibration and evaluation.

    ``1 - F_HG(i_alpha - 1; M + N, N, i_alpha + floor(M t))`` with N the
    calibration size and M the number of evaluated nodes.
    """
    n, m, i_a = params.n_cal, params.m_eval, params.i_alpha
    if t < 0:
        return 0.0
    if t >= 1:
        return 1.0
    if i_a > n:
        # threshold is -inf: every set is full and coverage is exactly 1
        return 0.0
    covered = math.floor(m * t + 1e-9)
    return 1.0 - hypergeom_cdf(i_a - 1, m + n, n, i_a + covered)


def nodeex_coverage_law(n_cal: int, m_eval: int, alpha: float, beta: float) -> float:
    """P(Cov(mask) <= beta) for recalibrated CP over a mask of ``m_eval`` nodes.

    The mask coverage follows the same law as a single transductive column
    with ``m_eval`` evaluated nodes.
    """
    return transductive_coverage_law(CoverageLawParams(n_cal, m_eval, alpha), beta)


def beta_coverage_params(n_cal: int, alpha: float) -> tuple[int, int]:
    """Parameters (n + 1 - l, l) of the Beta coverage law, l = floor((n + 1) alpha)."""
    if n_cal < 1:
        raise ValueError("n_cal must be positive")
    l = math.floor((n_cal + 1) * alpha + 1e-12)
    if l < 1:
        raise DegenerateLaw(f"n_cal={n_cal} is too small for alpha={alpha}")
    return n_cal + 1 - l, l
