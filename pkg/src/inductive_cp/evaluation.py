"""Coverage bookkeeping and metrics over prediction-set records."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

RECORD_COLUMNS = ("seed", "engine", "node_id", "arrival_t", "eval_t", "set_size",
                  "covered", "q_used")
AGGREGATE_COLUMNS = ("seed", "engine", "t", "coverage", "avg_size", "singleton_hit",
                     "emd_cal", "emd_test")


@dataclass(frozen=True)
class PredictionSetRecord:
    node_id: int
    arrival_t: int
    timestep: int
    label_set: frozenset | None
    true_label: int
    covered: bool
    set_size: int
    q_used: float
    engine: str
    seed: int

    @property
    def applicable(self) -> bool:
        return self.label_set is not None

    @classmethod
    def make(cls, node_id, arrival_t, timestep, label_set, true_label, q_used, engine, seed):
        s = frozenset(label_set)
        return cls(int(node_id), int(arrival_t), int(timestep), s, int(true_label),
                   int(true_label) in s, len(s), float(q_used), engine, int(seed))

    @classmethod
    def inapplicable(cls, node_id, arrival_t, timestep, true_label, engine, seed):
        return cls(int(node_id), int(arrival_t), int(timestep), None, int(true_label),
                   False, 0, float("nan"), engine, int(seed))

    def as_row(self) -> dict:
        return {
            "seed": self.seed, "engine": self.engine, "node_id": self.node_id,
            "arrival_t": self.arrival_t, "eval_t": self.timestep,
            "set_size": self.set_size if self.applicable else "",
            "covered": int(self.covered) if self.applicable else "",
            "q_used": f"{self.q_used:.12g}",
        }


class EvaluationMask(dict):
    """Partial map node -> evaluation timestep, at most one entry per node."""

    def __init__(self, assignments=(), arrival=None):
        super().__init__(assignments)
        if arrival is not None:
            for v, t in self.items():
                if t < arrival[v]:
                    raise ValueError(f"node {v} evaluated at {t} before arrival {arrival[v]}")

    def at(self, t: int) -> list[int]:
        return sorted(v for v, s in self.items() if s == t)


@dataclass
class CoverageMatrix:
    """Node x timestep outcomes: 1 covered, 0 miscovered, -1 not present.

    Rows follow ``nodes``; columns follow ``steps``.
    """

    nodes: np.ndarray
    steps: np.ndarray
    entries: np.ndarray
    arrival: np.ndarray

    def column_coverage(self) -> np.ndarray:
        present = self.entries >= 0
        with np.errstate(invalid="ignore"):
            return np.where(present.any(0),
                            (self.entries == 1).sum(0) / np.maximum(present.sum(0), 1), np.nan)

    def mask_coverage(self, mask: dict[int, int]) -> float:
        row = {int(v): i for i, v in enumerate(self.nodes)}
        col = {int(t): j for j, t in enumerate(self.steps)}
        vals = []
        for v, t in mask.items():
            e = self.entries[row[v], col[t]]
            if e < 0:
                raise ValueError(f"node {v} not present at t={t}")
            vals.append(e)
        if not vals:
            raise ValueError("empty mask")
        return float(np.mean(vals))

    def diagonal(self) -> np.ndarray:
        """Outcome of each node at its arrival step."""
        col = {int(t): j for j, t in enumerate(self.steps)}
        return np.array([self.entries[i, col[int(a)]] for i, a in enumerate(self.arrival)])


def _applicable(records) -> list[PredictionSetRecord]:
    recs = [r for r in records if r.applicable]
    if not recs:
        raise ValueError("no (applicable) records")
    return recs


def empirical_coverage(records: Iterable[PredictionSetRecord]) -> float:
    recs = _applicable(records)
    return sum(r.covered for r in recs) / len(recs)


def deviation_from_target(records, alpha: float, percent: bool = False) -> float:
    d = abs(empirical_coverage(records) - (1.0 - alpha))
    return 100.0 * d if percent else d


def avg_set_size(records) -> float:
    recs = _applicable(records)
    return sum(r.set_size for r in recs) / len(recs)


def singleton_hit_ratio(records) -> float:
    recs = _applicable(records)
    return sum(r.set_size == 1 and r.covered for r in recs) / len(recs)


def inapplicable_fraction(records) -> float:
    recs = list(records)
    if not recs:
        raise ValueError("no records")
    return sum(not r.applicable for r in recs) / len(recs)


def emd_1d(samples_a: Sequence[float], samples_b: Sequence[float]) -> float:
    """Wasserstein-1 distance between two empirical distributions.

    Integrates |F_a - F_b| over the merged support, which is exact for
    discrete samples of any sizes.
    """
    a = np.sort(np.asarray(samples_a, dtype=float))
    b = np.sort(np.asarray(samples_b, dtype=float))
    if a.size == 0 or b.size == 0:
        raise ValueError("emd_1d needs two nonempty samples")
    grid = np.concatenate([a, b])
    grid.sort(kind="mergesort")
    widths = np.diff(grid)
    fa = np.searchsorted(a, grid[:-1], side="right") / a.size
    fb = np.searchsorted(b, grid[:-1], side="right") / b.size
    return float(np.sum(np.abs(fa - fb) * widths))


def smooth(series: Sequence[float], window: int = 10) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    x = np.asarray(series, dtype=float)
    c = np.cumsum(np.insert(x, 0, 0.0))
    idx = np.arange(1, len(x) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def coverage_cdf_compare(per_trial_coverages: Sequence[float],
                         law: Callable[[float], float], min_trials: int = 100,
                         grid=None) -> float:
    """Largest gap between the empirical CDF and ``law`` on ``grid``.

    The default grid is 0, 0.01, ..., 1. For coverages of an m-node mask pass
    ``np.arange(m + 1) / m`` to get the exact sup over all jump points.
    """
    cov = np.sort(np.asarray(per_trial_coverages, dtype=float))
    if cov.size < min_trials:
        raise ValueError(f"need at least {min_trials} trials, got {cov.size}")
    grid = np.round(np.arange(101) * 0.01 if grid is None else np.asarray(grid, float), 10)
    # tolerate float noise in coverages such as 179/200
    ecdf = np.searchsorted(cov, grid + 1e-12, side="right") / cov.size
    theory = np.array([law(b) for b in grid])
    return float(np.max(np.abs(ecdf - theory)))


def spearman(x, y) -> float:
    from scipy.stats import spearmanr

    if np.ptp(np.asarray(x, dtype=float)) == 0 or np.ptp(np.asarray(y, dtype=float)) == 0:
        return 0.0
    r = spearmanr(x, y).statistic
    return float(r) if not math.isnan(r) else 0.0


# --- emission ---------------------------------------------------------------


def cumulative_aggregates(records: Sequence[PredictionSetRecord], step_stats=None,
                          seed: int = 0, emd_window: int = 10) -> list[dict]:
    """Per-engine, per-timestep running metrics over records evaluated up to t.

    EMD columns are smoothed over ``emd_window`` evaluated steps; the raw
    series stays in ``step_stats``.
    """
    stats = sorted(step_stats or [], key=lambda s: s.t)
    emd = {}
    if stats:
        cal_s = smooth([s.emd_cal for s in stats], emd_window)
        test_s = smooth([s.emd_test for s in stats], emd_window)
        emd = {s.t: (c, e) for s, c, e in zip(stats, cal_s, test_s)}
    rows = []
    by_engine: dict[str, list] = {}
    for r in records:
        by_engine.setdefault(r.engine, []).append(r)
    for eng, recs in by_engine.items():
        recs = sorted(recs, key=lambda r: (r.timestep, r.node_id))
        n = cov = size = hit = 0
        i = 0
        while i < len(recs):
            t = recs[i].timestep
            while i < len(recs) and recs[i].timestep == t:
                r = recs[i]
                if r.applicable:
                    n += 1
                    cov += r.covered
                    size += r.set_size
                    hit += r.covered and r.set_size == 1
                i += 1
            st = emd.get(t)
            rows.append({
                "seed": seed, "engine": eng, "t": t,
                "coverage": f"{cov / n:.6f}" if n else "",
                "avg_size": f"{size / n:.6f}" if n else "",
                "singleton_hit": f"{hit / n:.6f}" if n else "",
                "emd_cal": f"{st[0]:.8f}" if st else "",
                "emd_test": f"{st[1]:.8f}" if st else "",
            })
    return rows


def write_csv(path, rows: Iterable[dict], columns: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow(row)
