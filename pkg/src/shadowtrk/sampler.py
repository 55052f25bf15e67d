"""ShaDow ego-subgraph sampling.

Two implementations with the same output distribution:

* :func:`shadow_reference` walks each root separately, choosing ``s``
  distinct neighbors for every vertex of the current frontier, ``d`` times.
* :func:`bulk_shadow` does the same for ``k`` stacked minibatches at once
  with sparse-matrix products: frontier ``Q`` times adjacency, row
  normalization into ``P``, per-row draws, frontier expansion, and a final
  selection-product extraction of one induced subgraph per root from the
  touched-vertex indicator ``F``.

Randomness enters only through per-row subset draws. A numpy ``Generator``
is the normal source; any object with a ``choose(candidates, s)`` method can
stand in for it (used to enumerate every outcome exactly in tests).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .sparse import (
    CooMatrix,
    CsrMatrix,
    block_diag,
    block_induced_subgraphs,
    csr_from_arrays,
    csr_to_coo,
    induced_subgraph,
    pattern,
    row_normalize,
    selection_matrix,
    spgemm,
    transpose,
    union_pattern,
)

INDEX = np.int64


class Chooser(Protocol):
    def choose(self, candidates: np.ndarray, s: int) -> Sequence[int]: ...


@dataclass(frozen=True)
class SamplerConfig:
    depth: int = 3
    fanout: int = 6
    batch_size: int = 256
    bulk_batches: int = 1
    symmetrize: bool = True

    def __post_init__(self):
        for name in ("depth", "fanout", "batch_size", "bulk_batches"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def max_component_size(self) -> int:
        return sum(self.fanout**i for i in range(self.depth + 1))


@dataclass
class SamplingGraph:
    """An adjacency prepared for sampling.

    ``edges`` holds the directed adjacency with value ``eid + 1`` for the
    edge at CSR position ``eid``; ``walk`` is the binary pattern the random
    expansion follows (optionally symmetrized).
    """

    edges: CsrMatrix
    walk: CsrMatrix
    node_features: np.ndarray | None = None
    edge_features: np.ndarray | None = None
    edge_labels: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.edges.n_rows


def prepare_graph(
    a: CsrMatrix,
    symmetrize: bool = True,
    node_features=None,
    edge_features=None,
    edge_labels=None,
) -> SamplingGraph:
    """Edge features and labels are indexed by CSR position of ``a``."""
    if a.n_rows != a.n_cols:
        raise ValueError("adjacency must be square")
    edges = CsrMatrix(a.n_rows, a.n_cols, a.row_ptr, a.col_idx, np.arange(1, a.nnz + 1, dtype=np.float64))
    walk = pattern(a)
    if symmetrize:
        walk = union_pattern(walk, transpose(walk))
    return SamplingGraph(edges, walk, node_features, edge_features, edge_labels)


def _as_graph(a, symmetrize: bool) -> SamplingGraph:
    return a if isinstance(a, SamplingGraph) else prepare_graph(a, symmetrize)


@dataclass
class SampledBatch:
    """Block-diagonal union of per-root induced subgraphs.

    Component i spans local vertices ``component_offsets[i]`` up to
    ``component_offsets[i + 1]``; inside a component vertices are ordered by
    global id. ``edge_ids`` maps each local edge back to the source graph.
    """

    adjacency: CooMatrix
    component_offsets: np.ndarray
    local_to_global: np.ndarray
    roots_local: np.ndarray
    edge_ids: np.ndarray
    node_features: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    edge_features: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    edge_labels: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def n_components(self) -> int:
        return len(self.component_offsets) - 1

    @property
    def n_vertices(self) -> int:
        return self.adjacency.n_rows

    @property
    def n_edges(self) -> int:
        return self.adjacency.nnz

    def component_vertices(self, i: int) -> np.ndarray:
        lo, hi = self.component_offsets[i], self.component_offsets[i + 1]
        return self.local_to_global[lo:hi]

    def vertex_sets(self) -> tuple[frozenset, ...]:
        return tuple(frozenset(self.component_vertices(i).tolist()) for i in range(self.n_components))

    def select_components(self, start: int, stop: int) -> "SampledBatch":
        """Sub-batch with components ``start..stop-1``, relabelled from 0."""
        lo, hi = int(self.component_offsets[start]), int(self.component_offsets[stop])
        adj = self.adjacency
        keep = (adj.rows >= lo) & (adj.rows < hi)
        sub = CooMatrix(hi - lo, hi - lo, adj.rows[keep] - lo, adj.cols[keep] - lo, adj.values[keep])
        return SampledBatch(
            adjacency=sub,
            component_offsets=self.component_offsets[start : stop + 1] - lo,
            local_to_global=self.local_to_global[lo:hi],
            roots_local=self.roots_local[start:stop] - lo,
            edge_ids=self.edge_ids[keep],
            node_features=self.node_features[lo:hi] if self.node_features.shape[0] else self.node_features,
            edge_features=self.edge_features[keep] if self.edge_features.shape[0] else self.edge_features,
            edge_labels=self.edge_labels[keep] if self.edge_labels.shape[0] else self.edge_labels,
        )


def _choose_one(rng, candidates: np.ndarray, s: int) -> np.ndarray:
    if isinstance(rng, np.random.Generator):
        if candidates.size <= s:
            return candidates
        return rng.choice(candidates, size=s, replace=False)
    return np.asarray(rng.choose(candidates, s), dtype=INDEX)


def sample_rows(p: CsrMatrix, s: int, rng, block_ptr: Sequence[int] | None = None) -> CsrMatrix:
    """Draw ``min(s, support)`` distinct columns uniformly from each row.

    ``rng`` is a Generator, a chooser, or a list of Generators where list
    entry j serves rows ``block_ptr[j]`` up to ``block_ptr[j + 1]``. Returns
    the picks as a 0/1 matrix shaped like ``p``.
    """
    if p.nnz and p.values.min() < 0:
        raise ValueError("sample_rows: negative probability mass")
    if s < 1:
        raise ValueError("fanout must be >= 1")
    if not isinstance(rng, (np.random.Generator, list, tuple)):
        picks = [np.sort(_choose_one(rng, p.row(i)[0], s)) for i in range(p.n_rows)]
        lengths = np.array([x.size for x in picks], dtype=INDEX)
        row_ptr = np.zeros(p.n_rows + 1, dtype=INDEX)
        np.cumsum(lengths, out=row_ptr[1:])
        cols = np.concatenate(picks) if picks else np.zeros(0, dtype=INDEX)
        return CsrMatrix(p.n_rows, p.n_cols, row_ptr, cols, np.ones(cols.size))

    if isinstance(rng, np.random.Generator):
        rngs, block_ptr = [rng], [0, p.n_rows]
    else:
        rngs = list(rng)
        if block_ptr is None or len(block_ptr) != len(rngs) + 1:
            raise ValueError("block_ptr must give one row range per generator")
    # s smallest of iid uniform keys = uniform s-subset without replacement
    keys = np.empty(p.nnz)
    for g, r0, r1 in zip(rngs, block_ptr[:-1], block_ptr[1:]):
        lo, hi = p.row_ptr[r0], p.row_ptr[r1]
        keys[lo:hi] = g.random(hi - lo)
    rows = p.row_ids()
    order = np.lexsort((keys, rows))
    rank = np.empty(p.nnz, dtype=INDEX)
    rank[order] = np.arange(p.nnz, dtype=INDEX) - p.row_ptr[rows[order]]
    keep = rank < s
    kept_rows = rows[keep]
    row_ptr = np.zeros(p.n_rows + 1, dtype=INDEX)
    np.cumsum(np.bincount(kept_rows, minlength=p.n_rows), out=row_ptr[1:])
    return CsrMatrix(p.n_rows, p.n_cols, row_ptr, p.col_idx[keep], np.ones(kept_rows.size))


def _finish_batch(graph: SamplingGraph, adj: CsrMatrix, local_to_global, offsets, roots) -> SampledBatch:
    coo = csr_to_coo(adj) if isinstance(adj, CsrMatrix) else adj
    edge_ids = np.rint(coo.values).astype(INDEX) - 1
    coo = CooMatrix(coo.n_rows, coo.n_cols, coo.rows, coo.cols, np.ones(coo.nnz))
    offsets = np.asarray(offsets, dtype=INDEX)
    roots_local = np.array(
        [offsets[i] + np.searchsorted(local_to_global[offsets[i] : offsets[i + 1]], r) for i, r in enumerate(roots)],
        dtype=INDEX,
    )
    batch = SampledBatch(coo, offsets, np.asarray(local_to_global, dtype=INDEX), roots_local, edge_ids)
    if graph.node_features is not None:
        batch.node_features = graph.node_features[batch.local_to_global]
    if graph.edge_features is not None:
        batch.edge_features = graph.edge_features[edge_ids]
    if graph.edge_labels is not None:
        batch.edge_labels = graph.edge_labels[edge_ids]
    return batch


def _check_roots(roots, n: int) -> np.ndarray:
    roots = np.asarray(roots, dtype=INDEX)
    if roots.size and (roots.min() < 0 or roots.max() >= n):
        raise ValueError("root index out of range")
    if np.unique(roots).size != roots.size:
        raise ValueError("roots within a batch must be distinct")
    return roots


def shadow_reference(a, roots, cfg: SamplerConfig, rng) -> SampledBatch:
    """Per-root frontier expansion followed by induced-subgraph extraction."""
    graph = _as_graph(a, cfg.symmetrize)
    roots = _check_roots(roots, graph.n)
    walk = graph.walk
    blocks, vertex_lists = [], []
    for root in roots.tolist():
        touched = {root}
        frontier = [root]
        for _ in range(cfg.depth):
            nxt = []
            for v in frontier:
                nbrs = walk.col_idx[walk.row_ptr[v] : walk.row_ptr[v + 1]]
                if nbrs.size:
                    nxt.extend(_choose_one(rng, nbrs, cfg.fanout).tolist())
            touched.update(nxt)
            frontier = nxt
            if not frontier:
                break
        vertices = np.array(sorted(touched), dtype=INDEX)
        sub, _ = induced_subgraph(graph.edges, vertices)
        blocks.append(csr_to_coo(sub))
        vertex_lists.append(vertices)
    adj, offsets = block_diag(blocks)
    l2g = np.concatenate(vertex_lists) if vertex_lists else np.zeros(0, dtype=INDEX)
    return _finish_batch(graph, adj, l2g, offsets, roots)


@dataclass
class FrontierSet:
    """Matrices of the last bulk expansion step.

    ``q`` is the expanded frontier (one nonzero per row), ``f`` the
    touched-vertex indicator with one row per root across all stacked
    batches, ``p`` the last row-normalized neighborhood matrix.
    """

    q: CsrMatrix
    f: CsrMatrix
    p: CsrMatrix | None


def bulk_shadow(a, batches: Sequence, cfg: SamplerConfig, rng, return_frontier: bool = False):
    """Sample every batch in ``batches`` with one stacked set of matrix products.

    ``rng`` may be a list with one Generator per batch (so a batch's sample
    does not depend on which other batches share the call), a single
    Generator (split into per-batch child streams), or a chooser. With
    ``return_frontier`` the final :class:`FrontierSet` is returned as well.
    """
    graph = _as_graph(a, cfg.symmetrize)
    n = graph.n
    batches = [_check_roots(b, n) for b in batches]
    if isinstance(rng, np.random.Generator):
        rng = rng.spawn(len(batches))
    sizes = np.array([b.size for b in batches], dtype=INDEX)
    roots = np.concatenate(batches) if batches else np.zeros(0, dtype=INDEX)
    n_roots = roots.size

    # Q: one nonzero per row at each root's column; owner maps rows to roots
    q = selection_matrix(roots, n)
    owner = np.arange(n_roots, dtype=INDEX)
    block_ptr = np.zeros(len(batches) + 1, dtype=INDEX)
    np.cumsum(sizes, out=block_ptr[1:])
    f_rows, f_cols = [owner], [roots]
    p = None

    for _ in range(cfg.depth):
        if q.n_rows == 0:
            break
        p = row_normalize(spgemm(q, graph.walk))
        picks = sample_rows(p, cfg.fanout, rng, block_ptr)
        # expand: every picked (row, col) becomes its own frontier row
        parent = picks.row_ids()
        owner = owner[parent]
        q = selection_matrix(picks.col_idx, n)
        block_ptr = picks.row_ptr[block_ptr]
        f_rows.append(owner)
        f_cols.append(picks.col_idx)

    f = csr_from_arrays(n_roots, n, np.concatenate(f_rows), np.concatenate(f_cols))
    f = CsrMatrix(f.n_rows, f.n_cols, f.row_ptr, f.col_idx, np.ones(f.nnz))
    blocks, l2g, offsets = block_induced_subgraphs(graph.edges, f)

    out = []
    root_ptr = np.concatenate([[0], np.cumsum(sizes)])
    for j in range(len(batches)):
        r0, r1 = root_ptr[j], root_ptr[j + 1]
        v0, v1 = offsets[r0], offsets[r1]
        sub = blocks.row_slice(v0, v1)
        sub = CsrMatrix(sub.n_rows, v1 - v0, sub.row_ptr, sub.col_idx - v0, sub.values)
        out.append(_finish_batch(graph, sub, l2g[v0:v1], offsets[r0 : r1 + 1] - v0, batches[j]))
    if return_frontier:
        return out, FrontierSet(q, f, p)
    return out
