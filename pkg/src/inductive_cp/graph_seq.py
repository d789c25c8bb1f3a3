"""Graphs, exchangeable arrival schedules and the views they induce."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

NODE = "node"
EDGE = "edge"


def canonical_edges(edges, num_nodes: int | None = None) -> tuple[np.ndarray, int, int]:
    """Symmetrize an edge list: (unique sorted pairs, #self-loops, #duplicates)."""
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if num_nodes is not None and e.size and (e.min() < 0 or e.max() >= num_nodes):
        raise ValueError("edge endpoint out of range")
    loops = e[:, 0] == e[:, 1]
    e = np.sort(e[~loops], axis=1)
    uniq = np.unique(e, axis=0) if len(e) else e.reshape(0, 2)
    return uniq, int(loops.sum()), int(len(e) - len(uniq))


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected simple graph with node features and labels.

    ``edges`` holds each undirected pair once as (low, high).
    """

    num_nodes: int
    edges: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    node_ids: np.ndarray | None = None

    def __post_init__(self):
        e, loops, dups = canonical_edges(self.edges, self.num_nodes)
        if loops:
            raise ValueError("self-loops are not stored in a Graph")
        object.__setattr__(self, "edges", e)
        feats = np.asarray(self.features, dtype=float)
        if feats.ndim == 1:
            feats = feats.reshape(-1, 1)
        labels = np.asarray(self.labels, dtype=np.int64)
        if len(feats) != self.num_nodes or len(labels) != self.num_nodes:
            raise ValueError(
                f"features ({len(feats)}) / labels ({len(labels)}) do not match "
                f"num_nodes={self.num_nodes}"
            )
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        if self.node_ids is None:
            object.__setattr__(self, "node_ids", np.arange(self.num_nodes))

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.num_nodes else 0

    def permuted(self, perm: np.ndarray) -> "Graph":
        """Relabel so that new node ``i`` is old node ``perm[i]``."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        return Graph(
            self.num_nodes,
            inv[self.edges],
            self.features[perm],
            self.labels[perm],
            self.node_ids[perm],
        )


@dataclass(frozen=True, eq=False)
class ArrivalSchedule:
    """Order in which nodes (or edges) of a base graph arrive.

    ``order`` is a node permutation for node-inductive schedules and an array
    of edge indices into ``base.edges`` for edge-inductive ones. The first
    ``t_train`` entries form the pinned training subgraph, entries up to
    ``t0_cal`` carry the calibration set.
    """

    kind: str
    order: np.ndarray
    t0_cal: int
    t_train: int = 0
    pinned_nodes: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    cal_nodes: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    def __post_init__(self):
        if self.kind not in (NODE, EDGE):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if not 0 <= self.t_train <= self.t0_cal <= len(self.order):
            raise ValueError("need 0 <= t_train <= t0_cal <= len(order)")

    def __len__(self) -> int:
        return len(self.order)


@dataclass(frozen=True, eq=False)
class GraphView:
    """The graph G_t: active nodes (sorted ids) and active edges of a base graph."""

    base: Graph
    nodes: np.ndarray
    edges: np.ndarray
    timestep: int

    @property
    def num_active(self) -> int:
        return len(self.nodes)

    def local_index(self, node_ids) -> np.ndarray:
        """Row positions of ``node_ids`` in this view; raises on inactive nodes."""
        ids = np.asarray(node_ids)
        pos = np.searchsorted(self.nodes, ids)
        pos = np.minimum(pos, max(len(self.nodes) - 1, 0))
        if len(self.nodes) == 0 or np.any(self.nodes[pos] != ids):
            raise KeyError("node not active in this view")
        return pos

    def is_active(self, v: int) -> bool:
        i = np.searchsorted(self.nodes, v)
        return bool(i < len(self.nodes) and self.nodes[i] == v)

    def degrees(self) -> np.ndarray:
        """Degree of every active node, aligned with ``nodes``."""
        deg = np.zeros(len(self.nodes), dtype=np.int64)
        if len(self.edges):
            np.add.at(deg, self.local_index(self.edges.ravel()), 1)
        return deg

    def local_edges(self) -> np.ndarray:
        if len(self.edges) == 0:
            return np.zeros((0, 2), dtype=np.int64)
        return self.local_index(self.edges.ravel()).reshape(-1, 2)


def induced_view(base: Graph, nodes, timestep: int = -1) -> GraphView:
    """Subgraph of ``base`` induced by ``nodes``."""
    mask = np.zeros(base.num_nodes, dtype=bool)
    mask[np.asarray(nodes, dtype=np.int64)] = True
    keep = mask[base.edges[:, 0]] & mask[base.edges[:, 1]]
    return GraphView(base, np.flatnonzero(mask), base.edges[keep], timestep)


def stratified_nodes(labels: np.ndarray, per_class: int, rng: np.random.Generator,
                     exclude=None) -> np.ndarray:
    """Sample ``per_class`` nodes of every class (fewer if a class is small)."""
    labels = np.asarray(labels)
    free = np.ones(len(labels), dtype=bool)
    if exclude is not None:
        free[np.asarray(exclude, dtype=np.int64)] = False
    picked = []
    for c in np.unique(labels):
        pool = np.flatnonzero((labels == c) & free)
        take = min(per_class, len(pool))
        picked.append(rng.choice(pool, size=take, replace=False))
    return np.sort(np.concatenate(picked)) if picked else np.zeros(0, np.int64)


def node_sequence(base: Graph, rng: np.random.Generator, n_cal: int = 0,
                  pinned: Sequence[int] = ()) -> ArrivalSchedule:
    """Node-exchangeable schedule: pinned nodes, then calibration, then tests.

    Every order of the free nodes is equally likely; the first ``n_cal`` free
    nodes form the calibration set.
    """
    if base.num_nodes < 1:
        raise ValueError("base graph is empty")
    pinned = np.asarray(pinned, dtype=np.int64)
    free = np.setdiff1d(np.arange(base.num_nodes), pinned)
    if n_cal > len(free):
        raise ValueError(f"n_cal={n_cal} exceeds {len(free)} free nodes")
    perm = rng.permutation(free)
    order = np.concatenate([rng.permutation(pinned), perm])
    t_train = len(pinned)
    return ArrivalSchedule(NODE, order, t_train + n_cal, t_train, pinned,
                           np.sort(perm[:n_cal]))


def edge_sequence(base: Graph, rng: np.random.Generator, n_cal_edges: int = 0,
                  pinned: Sequence[int] = ()) -> ArrivalSchedule:
    """Edge-exchangeable schedule over the edges of ``base``.

    Edges among pinned (training) nodes come first. The next ``n_cal_edges``
    edges are calibration edges: their non-pinned endpoints are the
    calibration nodes. Remaining edges follow in uniformly random order.
    """
    if len(base.edges) < 1:
        raise ValueError("base graph has no edges")
    pinned = np.asarray(pinned, dtype=np.int64)
    is_pinned = np.zeros(base.num_nodes, dtype=bool)
    is_pinned[pinned] = True
    e = base.edges
    inner = is_pinned[e[:, 0]] & is_pinned[e[:, 1]]
    head = rng.permutation(np.flatnonzero(inner))
    rest = rng.permutation(np.flatnonzero(~inner))
    if n_cal_edges > len(rest):
        raise ValueError(f"n_cal_edges={n_cal_edges} exceeds {len(rest)} free edges")
    order = np.concatenate([head, rest])
    cal = np.unique(e[rest[:n_cal_edges]].ravel())
    cal = cal[~is_pinned[cal]]
    t_train = len(head)
    return ArrivalSchedule(EDGE, order, t_train + n_cal_edges, t_train, pinned, cal)


def view_at(schedule: ArrivalSchedule, base: Graph, t: int) -> GraphView:
    """G_t: node case keeps the first t nodes with all edges among them; edge
    case keeps the first t edges, their endpoints and (from ``t_train`` on)
    the pinned nodes."""
    if not 0 <= t <= len(schedule.order):
        raise IndexError(f"t={t} outside [0, {len(schedule.order)}]")
    if schedule.kind == NODE:
        return induced_view(base, schedule.order[:t], t)
    edges = base.edges[np.sort(schedule.order[:t])]
    active = np.unique(edges.ravel())
    if t >= schedule.t_train and len(schedule.pinned_nodes):
        active = np.union1d(active, schedule.pinned_nodes)
    return GraphView(base, active.astype(np.int64), edges, t)


def arrival_times(schedule: ArrivalSchedule, base: Graph) -> np.ndarray:
    """Timestep at which each base node becomes active (-1 if never)."""
    arr = np.full(base.num_nodes, -1, dtype=np.int64)
    if schedule.kind == NODE:
        arr[schedule.order] = np.arange(1, len(schedule.order) + 1)
        return arr
    ends = base.edges[schedule.order]
    steps = np.repeat(np.arange(1, len(schedule.order) + 1), 2)
    flat = ends.ravel()
    # first occurrence of every endpoint along the order
    first = np.full(base.num_nodes, np.iinfo(np.int64).max)
    np.minimum.at(first, flat, steps)
    seen = first < np.iinfo(np.int64).max
    arr[seen] = first[seen]
    pinned = schedule.pinned_nodes
    if len(pinned):
        arr[pinned] = np.where(arr[pinned] < 0, schedule.t_train,
                               np.minimum(arr[pinned], schedule.t_train))
    return arr


def eval_candidates(schedule: ArrivalSchedule, base: Graph) -> np.ndarray:
    """Nodes arriving after calibration, ordered by arrival."""
    arr = arrival_times(schedule, base)
    idx = np.flatnonzero(arr > schedule.t0_cal)
    skip = np.zeros(base.num_nodes, dtype=bool)
    skip[schedule.cal_nodes] = True
    skip[schedule.pinned_nodes] = True
    idx = idx[~skip[idx]]
    return idx[np.argsort(arr[idx], kind="stable")]


def degree_in_view(view: GraphView, v: int) -> int:
    if not view.is_active(v):
        raise KeyError(f"node {v} is not active at t={view.timestep}")
    e = view.edges
    return int(np.count_nonzero(e[:, 0] == v) + np.count_nonzero(e[:, 1] == v))


# --- generators --------------------------------------------------------------


def graphon_sample(W: Callable[[np.ndarray, np.ndarray], np.ndarray], n: int,
                   rng: np.random.Generator, return_latent: bool = False):
    """Sample an n-node graph from graphon ``W`` (vectorized over arrays).

    Features are empty and labels zero; callers attach their own.
    """
    if n < 1:
        raise ValueError("n must be positive")
    u = rng.random(n)
    iu, ju = np.triu_indices(n, k=1)
    p = np.broadcast_to(np.asarray(W(u[iu], u[ju]), dtype=float), iu.shape)
    hit = rng.random(iu.size) < p
    g = Graph(n, np.stack([iu[hit], ju[hit]], axis=1), np.zeros((n, 0)),
              np.zeros(n, dtype=np.int64))
    return (g, u) if return_latent else g


def sbm_homophilous(n: int, k_classes: int, p_in: float, p_out: float,
                    feat_dim: int, feat_separation: float,
                    rng: np.random.Generator) -> Graph:
    """Block model with class-aligned blocks, drawn as a step graphon.

    Node ``i`` falls in block ``floor(u_i * k)``. Features are Gaussian with
    unit variance around class means spaced ``feat_separation`` along random
    orthonormal directions.
    """
    if not 0.0 <= p_out <= p_in <= 1.0:
        raise ValueError("need 0 <= p_out <= p_in <= 1")

    def step(a, b):
        same = np.floor(a * k_classes) == np.floor(b * k_classes)
        return np.where(same, p_in, p_out)

    g, u = graphon_sample(step, n, rng, return_latent=True)
    labels = np.minimum((u * k_classes).astype(np.int64), k_classes - 1)
    basis = np.linalg.qr(rng.standard_normal((max(feat_dim, k_classes), k_classes)))[0]
    means = feat_separation * basis[:feat_dim].T
    feats = means[labels] + rng.standard_normal((n, feat_dim))
    return Graph(n, g.edges, feats, labels)


def edge_homophily(g: Graph) -> float:
    if len(g.edges) == 0:
        return float("nan")
    return float(np.mean(g.labels[g.edges[:, 0]] == g.labels[g.edges[:, 1]]))
