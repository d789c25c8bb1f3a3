"""Conformity scores (higher = more conforming) from class probabilities."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph_seq import GraphView

TPS, APS, DAPS = "tps", "aps", "daps"


@dataclass(frozen=True, eq=False)
class ScoreMatrix:
    """Per-node, per-class scores with rows aligned to ``nodes``.

    ``kind``, ``timestep`` and ``stream`` record where the matrix came from.
    """

    values: np.ndarray
    nodes: np.ndarray
    kind: str = ""
    timestep: int = -1
    stream: tuple = ()

    def rows(self, node_ids) -> np.ndarray:
        pos = np.searchsorted(self.nodes, node_ids)
        return self.values[pos]

    def true_label_scores(self, node_ids, labels) -> np.ndarray:
        pos = np.searchsorted(self.nodes, node_ids)
        return self.values[pos, np.asarray(labels)]


def tps_scores(probs: np.ndarray) -> np.ndarray:
    """Raw softmax probability as the score."""
    return np.array(probs, dtype=float, copy=True)


def aps_scores(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Negated cumulative mass: -(mass of strictly likelier classes + u * own mass)."""
    p = np.asarray(probs, dtype=float)
    u = np.asarray(u, dtype=float).reshape(-1, 1)
    # rho[v, y] = sum_c p[v, c] * [p[v, c] > p[v, y]]
    order = np.argsort(-p, axis=1, kind="stable")
    sorted_p = np.take_along_axis(p, order, axis=1)
    excl = np.cumsum(sorted_p, axis=1) - sorted_p
    # classes tied with their predecessor share the predecessor's rho
    ties = np.zeros_like(sorted_p, dtype=bool)
    ties[:, 1:] = sorted_p[:, 1:] == sorted_p[:, :-1]
    if ties.any():
        for j in range(1, p.shape[1]):
            excl[:, j] = np.where(ties[:, j], excl[:, j - 1], excl[:, j])
    rho = np.empty_like(p)
    np.put_along_axis(rho, order, excl, axis=1)
    return -(rho + u * p)


def daps_scores(base: np.ndarray, view: GraphView, lam: float = 0.5) -> np.ndarray:
    """One-hop neighbor averaging of scores, rows aligned with ``view.nodes``.

    ``s'[v] = (1 - lam) s[v] + lam * mean(s[u] for u in N(v))``; isolated
    nodes keep their own row.
    """
    s = np.asarray(base, dtype=float)
    if s.shape[0] != view.num_active:
        raise ValueError("score rows must cover every active node")
    le = view.local_edges()
    agg = np.zeros_like(s)
    np.add.at(agg, le[:, 0], s[le[:, 1]])
    np.add.at(agg, le[:, 1], s[le[:, 0]])
    deg = np.bincount(le.ravel(), minlength=s.shape[0]).astype(float)
    out = s.copy()
    has = deg > 0
    out[has] = (1.0 - lam) * s[has] + lam * agg[has] / deg[has, None]
    return out


def noise(seed: int, stream: int, t: int, node_ids: np.ndarray, n_total: int) -> np.ndarray:
    """Uniform tie-breaking values keyed by (seed, stream, t, node id).

    Negative ``t`` (views built outside a schedule) gets its own streams.
    """
    rng = np.random.default_rng([seed, stream, abs(t), int(t < 0)])
    return rng.random(n_total)[np.asarray(node_ids)]


def compute_scores(view: GraphView, model, kind: str = APS, seed: int = 0,
                   stream: int = 0, lam: float = 0.5, key: int | None = None) -> ScoreMatrix:
    """Run ``model`` on ``view`` and turn its probabilities into scores.

    APS noise is drawn per node from a stream keyed by the view's timestep
    (or ``key`` if given), so every recomputation gets fresh values.
    """
    probs = model.forward(view)
    k = view.timestep if key is None else key
    if kind == TPS:
        vals = tps_scores(probs)
    elif kind in (APS, DAPS):
        u = noise(seed, stream, k, view.nodes, view.base.num_nodes)
        vals = aps_scores(probs, u)
        if kind == DAPS:
            vals = daps_scores(vals, view, lam)
    else:
        raise ValueError(f"unknown score kind {kind!r}")
    return ScoreMatrix(vals, view.nodes, kind, view.timestep, (seed, stream, k))
