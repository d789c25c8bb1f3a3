"""Reading and writing graphs and externally computed probabilities.

File formats:

* edges: two integer columns per line (whitespace or comma separated,
  0-based ids). Self-loops and duplicates are dropped and counted. Lines
  starting with ``#`` are skipped.
* features: CSV of reals, row i = node i.
* labels: one integer per line.
* external probabilities: ``probs_t{t}.csv`` per timestep, one row per active
  node in arrival order, plus ``schedule.json`` describing the order.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph_seq import ArrivalSchedule, Graph, GraphView, arrival_times, canonical_edges

log = logging.getLogger(__name__)


class ParseError(ValueError):
    pass


@dataclass
class LoadReport:
    self_loops: int = 0
    duplicates: int = 0


def _split(line: str) -> list[str]:
    return [tok for tok in re.split(r"[,\s]+", line.strip()) if tok]


def read_edge_list(path) -> np.ndarray:
    pairs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            toks = _split(line)
            if len(toks) != 2:
                raise ParseError(f"{path}:{lineno}: expected two node ids, got {line.strip()!r}")
            try:
                a, b = int(toks[0]), int(toks[1])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-integer node id in {line.strip()!r}") from None
            if a < 0 or b < 0:
                raise ParseError(f"{path}:{lineno}: negative node id")
            pairs.append((a, b))
    return np.array(pairs, dtype=np.int64).reshape(-1, 2)


def _read_matrix(path, dtype, what: str) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            try:
                rows.append([dtype(tok) for tok in _split(line)])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: cannot parse {what} row {line.strip()!r}") from None
    widths = {len(r) for r in rows}
    if len(widths) > 1:
        raise ParseError(f"{path}: ragged {what} rows (widths {sorted(widths)})")
    return np.array(rows, dtype=dtype)


def load_graph(edges_path, features_path=None, labels_path=None,
               num_nodes: int | None = None) -> tuple[Graph, LoadReport]:
    """Build a validated Graph from files; returns it with a drop report."""
    raw = read_edge_list(edges_path)
    labels = None
    if labels_path is not None:
        lab = _read_matrix(labels_path, int, "label")
        if lab.ndim != 2 or lab.shape[1] != 1:
            raise ParseError(f"{labels_path}: labels must be a single column")
        labels = lab[:, 0]
    feats = _read_matrix(features_path, float, "feature") if features_path else None
    sizes = [len(x) for x in (labels, feats) if x is not None]
    if len(set(sizes)) > 1:
        raise ParseError(f"features ({len(feats)}) and labels ({len(labels)}) disagree")
    n = num_nodes if num_nodes is not None else (
        sizes[0] if sizes else int(raw.max()) + 1 if raw.size else 0)
    if raw.size and raw.max() >= n:
        raise ParseError(f"edge endpoint {int(raw.max())} >= node count {n}")
    if sizes and sizes[0] != n:
        raise ParseError(f"node count {n} disagrees with {sizes[0]} feature/label rows")
    edges, loops, dups = canonical_edges(raw, n)
    if loops or dups:
        log.warning("dropped %d self-loops and %d duplicate edges from %s", loops, dups, edges_path)
    if feats is None:
        feats = np.zeros((n, 0))
    if labels is None:
        labels = np.zeros(n, dtype=np.int64)
    return Graph(n, edges, feats, labels), LoadReport(loops, dups)


def save_graph(g: Graph, directory) -> dict[str, Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {"edges": d / "edges.csv", "features": d / "features.csv", "labels": d / "labels.csv"}
    np.savetxt(paths["edges"], g.edges, fmt="%d", delimiter=",")
    np.savetxt(paths["features"], g.features, fmt="%.17g", delimiter=",")
    np.savetxt(paths["labels"], g.labels, fmt="%d")
    return paths


# --- schedules and external probabilities -------------------------------------


def schedule_to_dict(s: ArrivalSchedule) -> dict:
    return {
        "kind": s.kind, "order": s.order.tolist(), "t0_cal": s.t0_cal,
        "t_train": s.t_train, "pinned_nodes": s.pinned_nodes.tolist(),
        "cal_nodes": s.cal_nodes.tolist(),
    }


def schedule_from_dict(d: dict) -> ArrivalSchedule:
    return ArrivalSchedule(
        d["kind"], np.asarray(d["order"], dtype=np.int64), int(d["t0_cal"]),
        int(d.get("t_train", 0)), np.asarray(d.get("pinned_nodes", []), dtype=np.int64),
        np.asarray(d.get("cal_nodes", []), dtype=np.int64),
    )


class ExternalProbs:
    """Stands in for a model: serves per-timestep probability files.

    Row ``r`` of ``probs_t{t}.csv`` belongs to the r-th active node in
    arrival order.
    """

    def __init__(self, directory, base: Graph, schedule: ArrivalSchedule | None = None):
        self.dir = Path(directory)
        self.schedule = schedule or schedule_from_dict(
            json.loads((self.dir / "schedule.json").read_text()))
        self.arrival = arrival_times(self.schedule, base)
        self._num_classes = None

    @property
    def num_classes(self) -> int:
        if self._num_classes is None:
            first = sorted(self.dir.glob("probs_t*.csv"))
            if not first:
                raise FileNotFoundError(f"no probs_t*.csv in {self.dir}")
            self._num_classes = _read_matrix(first[0], float, "probability").shape[1]
        return self._num_classes

    def forward(self, view: GraphView) -> np.ndarray:
        path = self.dir / f"probs_t{view.timestep}.csv"
        if not path.exists():
            raise FileNotFoundError(f"missing external probabilities {path}")
        p = _read_matrix(path, float, "probability")
        if len(p) != view.num_active:
            raise ParseError(f"{path}: {len(p)} rows for {view.num_active} active nodes")
        by_arrival = view.nodes[np.argsort(self.arrival[view.nodes], kind="stable")]
        out = np.empty_like(p)
        out[np.searchsorted(view.nodes, by_arrival)] = p
        self._num_classes = p.shape[1]
        return out


def write_external_probs(model, base: Graph, schedule: ArrivalSchedule, directory,
                         timesteps) -> None:
    """Dump ``model`` outputs in the external-probabilities layout."""
    from .graph_seq import view_at

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "schedule.json").write_text(json.dumps(schedule_to_dict(schedule)))
    arr = arrival_times(schedule, base)
    for t in timesteps:
        view = view_at(schedule, base, t)
        p = model.forward(view)
        order = np.argsort(arr[view.nodes], kind="stable")
        np.savetxt(d / f"probs_t{t}.csv", p[order], fmt="%.17g", delimiter=",")
