"""Independent oracles shared by the test modules."""
from __future__ import annotations

import itertools
from collections import defaultdict
from fractions import Fraction

import numpy as np

from shadowtrk.ignn import loss_and_grad
from shadowtrk.sparse import CooMatrix, CsrMatrix
from shadowtrk.trainer import prepare_events, sample_epoch, split_components


# --- exhaustive enumeration of sampler randomness ---------------------------

class ReplayChooser:
    """Replays a fixed prefix of choice indices and records every branch point.

    Each ``choose`` call lists the ``min(s, len)``-subsets of the candidates
    in lexicographic order; beyond the scripted prefix it takes subset 0.
    """

    def __init__(self, script):
        self.script = list(script)
        self.trace: list[tuple[int, int]] = []

    def choose(self, candidates, s):
        cands = sorted(int(c) for c in candidates)
        options = list(itertools.combinations(cands, min(s, len(cands))))
        pos = len(self.trace)
        pick = self.script[pos] if pos < len(self.script) else 0
        self.trace.append((pick, len(options)))
        return list(options[pick])


def enumerate_outcomes(run, key):
    """Exact outcome distribution of ``run(chooser)`` over all choice sequences.

    ``key`` maps the run's result to a hashable outcome. Returns
    {outcome: Fraction probability}.
    """
    dist: dict = defaultdict(Fraction)
    script: list[int] = []
    while True:
        chooser = ReplayChooser(script)
        result = run(chooser)
        prob = Fraction(1)
        for _, count in chooser.trace:
            prob /= count
        dist[key(result)] += prob
        # odometer: advance the deepest position that still has options
        trace = chooser.trace
        i = len(trace) - 1
        while i >= 0 and trace[i][0] + 1 >= trace[i][1]:
            i -= 1
        if i < 0:
            break
        script = [c for c, _ in trace[:i]] + [trace[i][0] + 1]
    return dict(dist)


def batch_outcome(batch):
    """Per component: (global vertex set, global edge-id set)."""
    out = []
    for c in range(batch.n_components):
        lo, hi = batch.component_offsets[c], batch.component_offsets[c + 1]
        verts = tuple(int(v) for v in batch.local_to_global[lo:hi])
        in_comp = (batch.adjacency.rows >= lo) & (batch.adjacency.rows < hi)
        eids = tuple(sorted(int(e) for e in batch.edge_ids[in_comp]))
        out.append((verts, eids))
    return tuple(out)


# --- graphs ----------------------------------------------------------------

def random_digraph(rng, n, p, allow_self=False) -> CsrMatrix:
    dense = (rng.random((n, n)) < p).astype(float)
    if not allow_self:
        np.fill_diagonal(dense, 0.0)
    return CsrMatrix.from_dense(dense)


def all_digraphs(n):
    """Every loop-free directed graph on n vertices as a dense 0/1 matrix."""
    slots = [(i, j) for i in range(n) for j in range(n) if i != j]
    for bits in range(1 << len(slots)):
        d = np.zeros((n, n))
        for k, (i, j) in enumerate(slots):
            if bits >> k & 1:
                d[i, j] = 1.0
        yield d


def dfs_partition(n, edges):
    """Vertex partition of an undirected graph by iterative depth-first search."""
    adj = [[] for _ in range(n)]
    for u, v in edges:
        adj[u].append(v)
        adj[v].append(u)
    seen = [False] * n
    parts = []
    for s in range(n):
        if seen[s]:
            continue
        comp, stack = [], [s]
        seen[s] = True
        while stack:
            u = stack.pop()
            comp.append(u)
            for w in adj[u]:
                if not seen[w]:
                    seen[w] = True
                    stack.append(w)
        parts.append(frozenset(comp))
    return set(parts)


# --- numerical differentiation ---------------------------------------------

def central_difference(f, x: np.ndarray, eps: float, indices=None) -> np.ndarray:
    """d f / d x by central differences; ``x`` is perturbed in place and restored."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.max(np.abs(b)), 1e-12)
    return float(np.max(np.abs(a - b)) / scale) if a.size else 0.0


# --- plain-loop model oracle -------------------------------------------------

def _act(z, kind):
    return {"relu": lambda v: np.maximum(v, 0.0), "tanh": np.tanh,
            "sigmoid": lambda v: 1.0 / (1.0 + np.exp(-v)), "identity": lambda v: v}[kind](z)


def loop_mlp(params, name, h, depth, hidden_act, out_act):
    for i in range(depth + 1):
        w = params.arrays[f"{name}.{i}.weight"]
        b = params.arrays[f"{name}.{i}.bias"][0]
        h = np.array([_act(row @ w + b, hidden_act if i < depth else out_act) for row in h]).reshape(len(h), -1)
    return h


def loop_ignn(params, src, dst, n, x, y):
    """Edge logits by explicit per-edge and per-vertex loops."""
    arch = params.arch
    f = arch.hidden

    def phi(name, h, out=arch.output_activation):
        return loop_mlp(params, name, h, arch.mlp_depth, arch.activation, out)

    x0, y0 = phi("node_encoder", x), phi("edge_encoder", y)
    xl, yl = x0, y0
    for l in range(arch.layers):
        xp = np.hstack([xl, x0])
        yp = np.hstack([yl, y0])
        msg_in = np.array([np.concatenate([yp[e], xp[src[e]], xp[dst[e]]]) for e in range(len(src))]).reshape(len(src), 6 * f)
        yl = phi(f"message.{l}", msg_in)
        m_src = np.zeros((n, f))
        m_dst = np.zeros((n, f))
        for e in range(len(src)):
            m_src[src[e]] += yl[e]
            m_dst[dst[e]] += yl[e]
        xl = phi(f"node_update.{l}", np.hstack([m_src, m_dst, xp]))
    return phi("head", np.hstack([yl, y0]), "identity").reshape(-1)


def coo(n, src, dst) -> CooMatrix:
    return CooMatrix(n, n, np.asarray(src), np.asarray(dst), np.ones(len(src)))


# --- data-parallel oracle -----------------------------------------------------

def sequential_oracle(events, cfg, params, epochs):
    """Same shards, gradients averaged in plain numpy, textbook Adam."""
    graphs = prepare_events(events)
    m = np.zeros(params.size)
    v = np.zeros(params.size)
    t = 0
    for epoch in range(epochs):
        for _, batch in sample_epoch(events, graphs, cfg, epoch):
            grads = []
            for shard in split_components(batch, cfg.workers):
                if shard.n_edges == 0:
                    continue
                grads.append(loss_and_grad(params, shard.adjacency, shard.node_features,
                                           shard.edge_features, shard.edge_labels)[1])
            if not grads:
                continue
            g = np.mean(grads, axis=0)
            t += 1
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            params.flat -= cfg.learning_rate * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    return params


# --- acceptance reporting ------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def report(number: int, name: str, ok: bool, detail: str) -> None:
    line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)
