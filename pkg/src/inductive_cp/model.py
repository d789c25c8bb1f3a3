"""Diffused-feature softmax classifier (SGC style).

Propagation uses the symmetric normalized adjacency with self-loops over the
active nodes of a view, so predictions are conditional on the current
subgraph and equivariant to node relabeling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import log_softmax, softmax

from .graph_seq import GraphView


def normalized_adjacency(view: GraphView) -> sp.csr_matrix:
    """D^-1/2 (A + I) D^-1/2 over the active nodes, rows ordered as ``view.nodes``."""
    m = view.num_active
    if m == 0:
        raise ValueError("view has no active nodes")
    le = view.local_edges()
    rows = np.concatenate([le[:, 0], le[:, 1], np.arange(m)])
    cols = np.concatenate([le[:, 1], le[:, 0], np.arange(m)])
    deg = np.bincount(rows, minlength=m).astype(float)
    d = 1.0 / np.sqrt(deg)
    vals = d[rows] * d[cols]
    return sp.csr_matrix((vals, (rows, cols)), shape=(m, m))


def diffuse(view: GraphView, hops: int) -> np.ndarray:
    """Â^hops X for the active nodes."""
    x = view.base.features[view.nodes]
    if hops == 0:
        return x
    a = normalized_adjacency(view)
    for _ in range(hops):
        x = a @ x
    return x


@dataclass
class EquivariantClassifier:
    weight: np.ndarray
    bias: np.ndarray
    hops: int = 2
    trained_on: str = ""
    loss_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.hops < 0:
            raise ValueError("hops must be >= 0")

    @property
    def num_classes(self) -> int:
        return self.bias.shape[0]

    def logits(self, view: GraphView) -> np.ndarray:
        if view.base.features.shape[1] != self.weight.shape[0]:
            raise ValueError(
                f"feature dim {view.base.features.shape[1]} != weight rows {self.weight.shape[0]}"
            )
        return diffuse(view, self.hops) @ self.weight + self.bias

    def forward(self, view: GraphView) -> np.ndarray:
        """Class probabilities for every active node of ``view``."""
        return softmax(self.logits(view), axis=1)


def forward(model, view: GraphView) -> np.ndarray:
    return model.forward(view)


def _loss_and_grad(z, y, weight, bias, l2):
    n, k = z.shape[0], bias.shape[0]
    logp = log_softmax(z @ weight + bias, axis=1)
    loss = -logp[np.arange(n), y].mean() + 0.5 * l2 * np.sum(weight**2)
    resid = np.exp(logp)
    resid[np.arange(n), y] -= 1.0
    resid /= n
    return loss, z.T @ resid + l2 * weight, resid.sum(axis=0)


def train(view_g0: GraphView, train_nodes, hops: int = 2, lr: float = 0.1,
          epochs: int = 300, l2: float = 5e-4, num_classes: int | None = None,
          rng: np.random.Generator | None = None) -> EquivariantClassifier:
    """Full-batch gradient descent on cross-entropy from a zero initialization.

    The per-epoch training loss is kept in ``loss_history``. ``rng`` is
    accepted for interface symmetry; zero initialization makes training
    deterministic.
    """
    train_nodes = np.asarray(train_nodes, dtype=np.int64)
    if train_nodes.size == 0:
        raise ValueError("empty training set")
    k = num_classes if num_classes is not None else view_g0.base.num_classes
    z_all = diffuse(view_g0, hops)
    rows = view_g0.local_index(train_nodes)
    z, y = z_all[rows], view_g0.base.labels[train_nodes]
    weight = np.zeros((z.shape[1], k))
    bias = np.zeros(k)
    history = []
    for _ in range(epochs):
        loss, gw, gb = _loss_and_grad(z, y, weight, bias, l2)
        history.append(loss)
        weight -= lr * gw
        bias -= lr * gb
    return EquivariantClassifier(weight, bias, hops,
                                 f"t={view_g0.timestep},n={len(rows)}", history)
