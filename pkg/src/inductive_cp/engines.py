"""Calibration engines for inductive node classification.

Every engine maps the graph at some timestep, a calibration set and a miscoverage
level to label sets for evaluated nodes:

* ``naive``: threshold frozen on calibration scores from the calibration-time
  graph; test scores come from the current graph.
* ``nodeex``: all scores (calibration included) recomputed on the current
  graph, unweighted threshold.
* ``edgeex``: as ``nodeex`` with calibration weights ``1 / degree`` in the
  current graph.
* ``naps``: per test node, only calibration nodes within ``naps_k`` hops count.
* ``subgraph_vote``: K random subgraphs containing the test node and the
  calibration set, combined by a randomized vote.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import graph_seq as gs
from .cp_core import InsufficientCalibrationMass, conformal_threshold
from .scores import APS, ScoreMatrix, compute_scores

NAIVE, NODEEX, EDGEEX, NAPS, VOTE = "naive", "nodeex", "edgeex", "naps", "subgraph_vote"
ENGINES = (NAIVE, NODEEX, EDGEEX, NAPS, VOTE)

# noise streams: sequence recomputations vs. subgraph draws
_SEQ_STREAM, _VOTE_STREAM = 0, 1


class NotApplicable:
    """Marker returned by NAPS when no calibration node is in reach."""

    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self):
        return "NotApplicable"


NOT_APPLICABLE = NotApplicable()


@dataclass(frozen=True)
class EngineConfig:
    engine: str = NODEEX
    alpha: float = 0.1
    score_kind: str = APS
    daps_lambda: float = 0.5
    naps_k: int = 1
    vote_K: int = 10
    vote_subgraph_fraction: float = 0.5
    vote_average_scores: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.engine not in ENGINES:
            raise ValueError(f"unknown engine {self.engine!r}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.naps_k < 1 or self.vote_K < 1:
            raise ValueError("naps_k and vote_K must be >= 1")
        if not 0.0 < self.vote_subgraph_fraction <= 1.0:
            raise ValueError("vote_subgraph_fraction must lie in (0, 1]")


@dataclass
class CalibrationSet:
    members: np.ndarray
    true_labels: np.ndarray
    frozen_scores: np.ndarray | None = None

    @classmethod
    def from_nodes(cls, base: gs.Graph, nodes) -> "CalibrationSet":
        nodes = np.sort(np.asarray(nodes, dtype=np.int64))
        if nodes.size == 0:
            raise ValueError("empty calibration set")
        return cls(nodes, base.labels[nodes])


def scores_for(view: gs.GraphView, model, config: EngineConfig, stream: int = _SEQ_STREAM,
               key: int | None = None) -> ScoreMatrix:
    return compute_scores(view, model, config.score_kind, config.seed, stream,
                          config.daps_lambda, key)


def _sets(scores: ScoreMatrix, nodes, q: float) -> dict[int, frozenset]:
    rows = scores.rows(nodes)
    return {int(v): frozenset(np.flatnonzero(r >= q).tolist()) for v, r in zip(nodes, rows)}


def _check_active(view: gs.GraphView, nodes) -> np.ndarray:
    nodes = np.asarray(list(nodes), dtype=np.int64)
    if nodes.size and not np.all(np.isin(nodes, view.nodes)):
        bad = nodes[~np.isin(nodes, view.nodes)]
        raise KeyError(f"inactive eval nodes at t={view.timestep}: {bad[:5].tolist()}")
    return nodes


# --- thresholds on precomputed scores ----------------------------------------


def nodeex_threshold(scores: ScoreMatrix, cal: CalibrationSet, alpha: float) -> float:
    return conformal_threshold(scores.true_label_scores(cal.members, cal.true_labels), alpha)


def edgeex_threshold(scores: ScoreMatrix, cal: CalibrationSet, alpha: float,
                     view: gs.GraphView) -> float:
    deg = view.degrees()[view.local_index(cal.members)]
    if np.any(deg == 0):
        raise ValueError(
            f"calibration node with zero degree at t={view.timestep}; schedule is corrupt"
        )
    try:
        return conformal_threshold(scores.true_label_scores(cal.members, cal.true_labels),
                                   alpha, 1.0 / deg)
    except InsufficientCalibrationMass as exc:
        raise InsufficientCalibrationMass(
            f"t={view.timestep}: calibration weight sum {np.sum(1.0 / deg):.3g} is too small "
            f"for alpha={alpha}; use more calibration edges ({exc})"
        ) from None


def k_hop_members(view: gs.GraphView, source: int, k: int, members: np.ndarray) -> np.ndarray:
    """Entries of ``members`` within ``k`` hops of ``source`` (source excluded)."""
    le = view.local_edges()
    m = view.num_active
    nbr_ptr = np.zeros(m + 1, dtype=np.int64)
    if len(le):
        both = np.concatenate([le, le[:, ::-1]])
        both = both[np.argsort(both[:, 0], kind="stable")]
        np.add.at(nbr_ptr, both[:, 0] + 1, 1)
        nbr_ptr = np.cumsum(nbr_ptr)
        nbr = both[:, 1]
    else:
        nbr = np.zeros(0, dtype=np.int64)
    src = int(view.local_index([source])[0])
    seen = np.zeros(m, dtype=bool)
    seen[src] = True
    frontier = np.array([src])
    for _ in range(k):
        if frontier.size == 0:
            break
        nxt = np.concatenate([nbr[nbr_ptr[i]:nbr_ptr[i + 1]] for i in frontier])
        nxt = np.unique(nxt[~seen[nxt]])
        seen[nxt] = True
        frontier = nxt
    seen[src] = False
    reach = view.nodes[seen]
    return members[np.isin(members, reach)]


def naps_threshold(scores: ScoreMatrix, cal: CalibrationSet, alpha: float,
                   view: gs.GraphView, node: int, k: int):
    """Threshold from calibration nodes within ``k`` hops, or NOT_APPLICABLE.

    Too few neighbors to reach the level gives ``-inf`` (the full label set),
    as in weighted CP with the test point's mass at infinity.
    """
    near = k_hop_members(view, node, k, cal.members)
    if near.size == 0:
        return NOT_APPLICABLE
    labels = cal.true_labels[np.searchsorted(cal.members, near)]
    try:
        return conformal_threshold(scores.true_label_scores(near, labels), alpha)
    except InsufficientCalibrationMass:
        return -np.inf


# --- public engine operations ------------------------------------------------


def naive_calibrate(cal: CalibrationSet, view_t0: gs.GraphView, model,
                    config: EngineConfig) -> float:
    """Freeze calibration scores on the calibration-time graph; return the threshold."""
    scores = scores_for(view_t0, model, config)
    cal.frozen_scores = scores.true_label_scores(cal.members, cal.true_labels)
    return conformal_threshold(cal.frozen_scores, config.alpha)


def naive_predict(q: float, view_t: gs.GraphView, model, config: EngineConfig,
                  eval_nodes) -> dict[int, frozenset]:
    nodes = _check_active(view_t, eval_nodes)
    return _sets(scores_for(view_t, model, config), nodes, q)


def nodeex_predict(cal: CalibrationSet, view_t: gs.GraphView, model, config: EngineConfig,
                   eval_nodes) -> dict[int, frozenset]:
    nodes = _check_active(view_t, eval_nodes)
    scores = scores_for(view_t, model, config)
    return _sets(scores, nodes, nodeex_threshold(scores, cal, config.alpha))


def edgeex_predict(cal: CalibrationSet, view_t: gs.GraphView, model, config: EngineConfig,
                   eval_nodes) -> dict[int, frozenset]:
    nodes = _check_active(view_t, eval_nodes)
    scores = scores_for(view_t, model, config)
    return _sets(scores, nodes, edgeex_threshold(scores, cal, config.alpha, view_t))


def naps_predict(cal: CalibrationSet, view_t: gs.GraphView, model, config: EngineConfig,
                 eval_nodes) -> dict[int, frozenset | NotApplicable]:
    nodes = _check_active(view_t, eval_nodes)
    scores = scores_for(view_t, model, config)
    out = {}
    for v in nodes:
        q = naps_threshold(scores, cal, config.alpha, view_t, int(v), config.naps_k)
        out[int(v)] = q if q is NOT_APPLICABLE else _sets(scores, [v], q)[int(v)]
    return out


@dataclass
class VoteOutcome:
    votes: np.ndarray
    chosen: frozenset
    union: frozenset
    intersection: frozenset
    draws: int = 0


def _vote(votes: np.ndarray, K: int, u: np.ndarray) -> VoteOutcome:
    chosen = frozenset(np.flatnonzero(u < votes / K).tolist())
    return VoteOutcome(votes, chosen, frozenset(np.flatnonzero(votes > 0).tolist()),
                       frozenset(np.flatnonzero(votes == K).tolist()), K)


def subgraph_vote_predict(cal: CalibrationSet, full_view: gs.GraphView, model,
                          config: EngineConfig, test_node: int,
                          return_outcome: bool = False):
    """Randomized vote over ``vote_K`` subgraphs that contain the test node.

    Each subgraph holds the test node, the calibration set and every other
    node of ``full_view`` independently with probability
    ``vote_subgraph_fraction``. Label ``y`` enters the final set with
    probability ``votes(y) / K`` (one Bernoulli draw per label).
    """
    rng = np.random.default_rng([config.seed, _VOTE_STREAM, int(test_node)])
    keep = np.union1d(cal.members, [test_node])
    others = np.setdiff1d(full_view.nodes, keep)
    K = config.vote_K
    n_cls = model.num_classes
    votes = np.zeros(n_cls, dtype=np.int64)
    avg_test, avg_cal = np.zeros(n_cls), np.zeros(len(cal.members))
    for k in range(K):
        pick = others[rng.random(len(others)) < config.vote_subgraph_fraction]
        sub = gs.induced_view(full_view.base, np.union1d(keep, pick), full_view.timestep)
        scores = scores_for(sub, model, config, _VOTE_STREAM,
                            key=int(rng.integers(2**31)))
        cal_s = scores.true_label_scores(cal.members, cal.true_labels)
        row = scores.rows([test_node])[0]
        if config.vote_average_scores:
            avg_test += row / K
            avg_cal += cal_s / K
        else:
            votes += row >= conformal_threshold(cal_s, config.alpha)
    if config.vote_average_scores:
        q = conformal_threshold(avg_cal, config.alpha)
        out = frozenset(np.flatnonzero(avg_test >= q).tolist())
        return (VoteOutcome(None, out, out, out, K), q) if return_outcome else out
    outcome = _vote(votes, K, rng.random(n_cls))
    return outcome if return_outcome else outcome.chosen


def subgraph_vote_many(cal: CalibrationSet, full_view: gs.GraphView, model,
                       config: EngineConfig, test_nodes, max_draws: int = 10_000
                       ) -> dict[int, VoteOutcome]:
    """Batched subgraph voting that shares random subgraphs across test nodes.

    Subgraph j holds the calibration set plus a Bernoulli(fraction) sample of
    all other nodes. A test node uses the first ``vote_K`` subgraphs it lands
    in; conditional on containing it, the rest of such a subgraph is still an
    independent Bernoulli sample, so each node sees exactly the randomization
    of the per-node procedure at a fraction of the forward passes.
    """
    test_nodes = _check_active(full_view, test_nodes)
    rng = np.random.default_rng([config.seed, _VOTE_STREAM + 1])
    K, f = config.vote_K, config.vote_subgraph_fraction
    n_cls = model.num_classes
    others = np.setdiff1d(full_view.nodes, cal.members)
    pos = {int(v): i for i, v in enumerate(test_nodes)}
    votes = np.zeros((len(test_nodes), n_cls), dtype=np.int64)
    used = np.zeros(len(test_nodes), dtype=np.int64)
    sum_test = np.zeros((len(test_nodes), n_cls))
    sum_cal = np.zeros((len(test_nodes), len(cal.members)))
    draws = 0
    while used.min(initial=K) < K:
        if draws >= max_draws:
            raise RuntimeError("subgraph voting did not reach K draws per node")
        pick = others[rng.random(len(others)) < f]
        draws += 1
        idx = np.array([pos[int(v)] for v in pick if int(v) in pos], dtype=np.int64)
        idx = idx[used[idx] < K]
        if idx.size == 0:
            continue
        sub = gs.induced_view(full_view.base, np.union1d(cal.members, pick),
                              full_view.timestep)
        scores = scores_for(sub, model, config, _VOTE_STREAM, key=draws)
        cal_s = scores.true_label_scores(cal.members, cal.true_labels)
        rows = scores.rows(test_nodes[idx])
        if config.vote_average_scores:
            sum_test[idx] += rows
            sum_cal[idx] += cal_s
        else:
            q = conformal_threshold(cal_s, config.alpha)
            votes[idx] += rows >= q
        used[idx] += 1
    u = rng.random((len(test_nodes), n_cls))
    out = {}
    for i, v in enumerate(test_nodes):
        if config.vote_average_scores:
            q = conformal_threshold(sum_cal[i] / K, config.alpha)
            s = frozenset(np.flatnonzero(sum_test[i] / K >= q).tolist())
            out[int(v)] = VoteOutcome(None, s, s, s, draws)
        else:
            o = _vote(votes[i], K, u[i])
            o.draws = draws
            out[int(v)] = o
    return out


# --- sequence evaluation -----------------------------------------------------


@dataclass(frozen=True)
class EvalPolicy:
    """When each test node is evaluated; fixed before any set is produced."""

    kind: str = "upon_arrival"
    t: int | None = None
    seed: int = 0

    @classmethod
    def upon_arrival(cls):
        return cls("upon_arrival")

    @classmethod
    def fixed_time(cls, t: int):
        return cls("fixed_time", t=t)

    @classmethod
    def random_time(cls, seed: int = 0):
        return cls("random_time", seed=seed)


def build_mask(schedule: gs.ArrivalSchedule, base: gs.Graph, policy: EvalPolicy) -> dict[int, int]:
    """Evaluation mask: test node -> evaluation timestep (each node at most once)."""
    T = len(schedule.order)
    arr = gs.arrival_times(schedule, base)
    nodes = gs.eval_candidates(schedule, base)
    if policy.kind == "upon_arrival":
        return {int(v): int(arr[v]) for v in nodes}
    if policy.kind == "fixed_time":
        t = T if policy.t is None else policy.t
        if not schedule.t0_cal < t <= T:
            raise ValueError(f"fixed time {t} outside ({schedule.t0_cal}, {T}]")
        return {int(v): t for v in nodes if arr[v] <= t}
    if policy.kind == "random_time":
        rng = np.random.default_rng([policy.seed, 7])
        times = rng.integers(arr[nodes], T + 1)
        return {int(v): int(s) for v, s in zip(nodes, times)}
    raise ValueError(f"unknown policy {policy.kind!r}")


@dataclass
class StepStats:
    """Per-timestep diagnostics shared by all engines of one run."""

    t: int
    emd_cal: float
    emd_test: float
    q: dict = field(default_factory=dict)


def evaluate_sequence(base: gs.Graph, schedule: gs.ArrivalSchedule, model,
                      config: EngineConfig, policy: EvalPolicy | None = None,
                      engines=None, mask: dict[int, int] | None = None,
                      step_stats: list | None = None):
    """Run one or more engines along a schedule and return prediction records.

    Scores are computed once per evaluated timestep and shared by all
    ``engines`` (default: ``config.engine``), which keeps engine comparisons
    paired. Timesteps with nothing to evaluate are skipped. If ``step_stats``
    is a list, per-timestep score-shift diagnostics are appended to it.
    """
    from .evaluation import PredictionSetRecord, emd_1d

    policy = policy or EvalPolicy.upon_arrival()
    engines = tuple(engines or (config.engine,))
    for e in engines:
        if e not in ENGINES:
            raise ValueError(f"unknown engine {e!r}")
    if mask is None:
        mask = build_mask(schedule, base, policy)
    arr = gs.arrival_times(schedule, base)
    for v, t in mask.items():
        if arr[v] < 0 or t < arr[v] or t > len(schedule.order):
            raise ValueError(f"node {v} cannot be evaluated at t={t}")
    cal = CalibrationSet.from_nodes(base, schedule.cal_nodes)
    view0 = gs.view_at(schedule, base, schedule.t0_cal)
    q_naive = naive_calibrate(cal, view0, model, config)
    frozen = cal.frozen_scores

    due: dict[int, list[int]] = {}
    for v, t in mask.items():
        due.setdefault(t, []).append(v)
    records = []
    for t in sorted(due):
        nodes = np.array(sorted(due[t]), dtype=np.int64)
        view = gs.view_at(schedule, base, t)
        scores = scores_for(view, model, config)
        cal_now = scores.true_label_scores(cal.members, cal.true_labels)
        qs = {}
        for eng in engines:
            if eng == NAIVE:
                qs[eng] = q_naive
            elif eng == NODEEX:
                qs[eng] = conformal_threshold(cal_now, config.alpha)
            elif eng == EDGEEX:
                qs[eng] = edgeex_threshold(scores, cal, config.alpha, view)
            if eng in qs:
                for v, s in _sets(scores, nodes, qs[eng]).items():
                    records.append(PredictionSetRecord.make(
                        v, int(arr[v]), t, s, int(base.labels[v]), qs[eng], eng, config.seed))
            elif eng == NAPS:
                for v in nodes:
                    q = naps_threshold(scores, cal, config.alpha, view, int(v), config.naps_k)
                    if q is NOT_APPLICABLE:
                        records.append(PredictionSetRecord.inapplicable(
                            int(v), int(arr[v]), t, int(base.labels[v]), eng, config.seed))
                    else:
                        s = _sets(scores, [v], q)[int(v)]
                        records.append(PredictionSetRecord.make(
                            int(v), int(arr[v]), t, s, int(base.labels[v]), q, eng, config.seed))
            elif eng == VOTE:
                outcomes = subgraph_vote_many(cal, view, model, config, nodes)
                for v in nodes:
                    records.append(PredictionSetRecord.make(
                        int(v), int(arr[v]), t, outcomes[int(v)].chosen, int(base.labels[v]),
                        float("nan"), eng, config.seed))
        if step_stats is not None:
            test_now = scores.true_label_scores(nodes, base.labels[nodes])
            step_stats.append(StepStats(t, emd_1d(frozen, cal_now), emd_1d(frozen, test_now), qs))
    return records


def coverage_matrix(base: gs.Graph, schedule: gs.ArrivalSchedule, model,
                    config: EngineConfig, t_end: int | None = None):
    """Full coverage matrix: every present test node evaluated at every step."""
    from .evaluation import CoverageMatrix

    T = len(schedule.order) if t_end is None else t_end
    nodes = gs.eval_candidates(schedule, base)
    arr = gs.arrival_times(schedule, base)
    nodes = nodes[arr[nodes] <= T]
    steps = np.arange(schedule.t0_cal + 1, T + 1)
    entries = np.full((len(nodes), len(steps)), -1, dtype=np.int8)
    cal = CalibrationSet.from_nodes(base, schedule.cal_nodes)
    q_naive = None
    if config.engine == NAIVE:
        q_naive = naive_calibrate(cal, gs.view_at(schedule, base, schedule.t0_cal), model, config)
    for j, t in enumerate(steps):
        present = np.flatnonzero(arr[nodes] <= t)
        if present.size == 0:
            continue
        view = gs.view_at(schedule, base, t)
        scores = scores_for(view, model, config)
        if config.engine == NAIVE:
            q = q_naive
        elif config.engine == NODEEX:
            q = nodeex_threshold(scores, cal, config.alpha)
        elif config.engine == EDGEEX:
            q = edgeex_threshold(scores, cal, config.alpha, view)
        else:
            raise ValueError("coverage matrix supports naive, nodeex and edgeex")
        vs = nodes[present]
        rows = scores.rows(vs)
        entries[present, j] = rows[np.arange(len(vs)), base.labels[vs]] >= q
    return CoverageMatrix(nodes, steps, entries, arr[nodes])
