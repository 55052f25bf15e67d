"""Track building from classified edges, and edge-level metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sparse import CooMatrix


@dataclass
class TrackSet:
    vertex_component: np.ndarray
    tracks: list[np.ndarray]

    @property
    def n_components(self) -> int:
        return int(self.vertex_component.max()) + 1 if self.vertex_component.size else 0


@dataclass
class EdgeMetrics:
    """Counts plus derived rates; a rate is None when its denominator is 0."""

    true_positives: int
    false_positives: int
    false_negatives: int
    threshold: float = 0.5

    @property
    def precision(self) -> float | None:
        d = self.true_positives + self.false_positives
        return self.true_positives / d if d else None

    @property
    def recall(self) -> float | None:
        d = self.true_positives + self.false_negatives
        return self.true_positives / d if d else None

    def __add__(self, other: "EdgeMetrics") -> "EdgeMetrics":
        return EdgeMetrics(
            self.true_positives + other.true_positives,
            self.false_positives + other.false_positives,
            self.false_negatives + other.false_negatives,
            self.threshold,
        )


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def classify_edges(logits, threshold: float = 0.5) -> np.ndarray:
    """sigmoid(logit) >= threshold, compared in logit space to avoid rounding."""
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(logits)):
        raise ValueError("classify_edges: non-finite logits")
    if threshold <= 0.0:
        return np.ones(logits.size, dtype=bool)
    if threshold >= 1.0:
        return np.zeros(logits.size, dtype=bool)
    return logits >= np.log(threshold) - np.log1p(-threshold)


class UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))
        self.size = [1] * n

    def find(self, a: int) -> int:
        root = a
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[a] != root:
            self.parent[a], a = root, self.parent[a]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]


def connected_components(adj: CooMatrix, mask, min_track_len: int = 3) -> TrackSet:
    """Components of the undirected graph formed by the masked edges.

    Component ids are numbered in order of each component's smallest vertex.
    """
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if mask.size != adj.nnz:
        raise ValueError(f"mask length {mask.size} != edge count {adj.nnz}")
    n = adj.n_rows
    uf = UnionFind(n)
    for u, v in zip(adj.rows[mask].tolist(), adj.cols[mask].tolist()):
        uf.union(u, v)
    roots = np.fromiter((uf.find(v) for v in range(n)), dtype=np.int64, count=n)
    # first occurrence scanning vertices in order = smallest member
    _, first, inverse = np.unique(roots, return_index=True, return_inverse=True)
    rank = np.empty(first.size, dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(first.size)
    comp = rank[inverse]
    members = np.argsort(comp, kind="stable")
    bounds = np.searchsorted(comp[members], np.arange(first.size + 1))
    tracks = [members[a:b] for a, b in zip(bounds[:-1], bounds[1:]) if b - a >= min_track_len]
    return TrackSet(comp, tracks)


def precision_recall(mask, labels, threshold: float = 0.5) -> EdgeMetrics:
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    if mask.size != labels.size:
        raise ValueError("mask and labels differ in length")
    tp = int(np.count_nonzero(mask & labels))
    fp = int(np.count_nonzero(mask & ~labels))
    fn = int(np.count_nonzero(~mask & labels))
    return EdgeMetrics(tp, fp, fn, threshold)


def micro_average(per_event: list[EdgeMetrics]) -> EdgeMetrics:
    """Sum counts over events before dividing."""
    total = EdgeMetrics(0, 0, 0, per_event[0].threshold if per_event else 0.5)
    for m in per_event:
        total = total + m
    return total


def threshold_sweep(logits_list, labels_list, thresholds) -> list[EdgeMetrics]:
    out = []
    for t in thresholds:
        out.append(micro_average([
            precision_recall(classify_edges(z, t), y, t) for z, y in zip(logits_list, labels_list)
        ]))
    return out
