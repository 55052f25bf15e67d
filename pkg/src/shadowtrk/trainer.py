"""Training loops, Adam, and data-parallel workers.

Workers are threads in one process. Each owns a full parameter replica, an
optimizer state and a tape; after forward/backward they average gradients
through an in-memory ring all-reduce, then apply identical Adam updates, so
replicas never need a broadcast. Gradients can be reduced one tensor at a
time or coalesced into a single buffer and reduced with one collective.
"""
from __future__ import annotations

import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tape, bce_with_logits
from .data import EventGraph
from .ignn import IgnnArchitecture, ModelParams, ignn_forward, init_params, predict_logits
from .sampler import SampledBatch, SamplerConfig, SamplingGraph, bulk_shadow, prepare_graph
from .tracks import EdgeMetrics, classify_edges, micro_average, precision_recall

log = logging.getLogger(__name__)

PHASES = ("sample", "forward", "backward", "allreduce", "optimizer")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    epochs: int = 30
    hidden: int = 64
    layers: int = 8
    depth: int = 3
    fanout: int = 6
    bulk: int = 1
    workers: int = 1
    learning_rate: float = 1e-3
    pos_weight: float = 1.0
    seed: int = 0
    mode: str = "minibatch"
    coalesce: bool = True
    mlp_depth: int = 2
    activation: str = "relu"
    symmetrize: bool = True
    roots_only_loss: bool = False
    activation_budget: int = 2_000_000_000
    threshold: float = 0.5

    def __post_init__(self):
        if self.mode not in ("minibatch", "fullgraph"):
            raise ValueError(f"mode must be 'minibatch' or 'fullgraph', not {self.mode!r}")
        if self.workers < 1 or self.bulk < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("workers, bulk, epochs and batch_size must be >= 1")
        if self.batch_size % self.workers:
            raise ValueError(f"batch size {self.batch_size} is not divisible by {self.workers} workers")
        if self.depth < 1 or self.fanout < 1:
            raise ValueError("depth and fanout must be >= 1")

    def sampler(self) -> SamplerConfig:
        return SamplerConfig(self.depth, self.fanout, self.batch_size, self.bulk, self.symmetrize)

    def architecture(self, node_in: int, edge_in: int) -> IgnnArchitecture:
        return IgnnArchitecture(self.layers, self.hidden, self.mlp_depth, node_in, edge_in, self.activation)

    def to_dict(self) -> dict:
        return asdict(self)


# --- communication ---------------------------------------------------------

class RingGroup:
    """Shared state of one in-process collective group of ``world_size`` ranks."""

    def __init__(self, world_size: int):
        if world_size < 1:
            raise ValueError("world size must be >= 1")
        self.world_size = world_size
        self._barrier = threading.Barrier(world_size)
        self._work: list[np.ndarray | None] = [None] * world_size

    def communicators(self) -> list["Communicator"]:
        return [Communicator(self, r) for r in range(self.world_size)]


class Communicator:
    """One rank's handle on a :class:`RingGroup`; counters are per rank."""

    def __init__(self, group: RingGroup, rank: int):
        self.group = group
        self.rank = rank
        self.calls = 0
        self.bytes = 0
        self.seconds = 0.0

    @property
    def world_size(self) -> int:
        return self.group.world_size

    def reset_counters(self) -> None:
        self.calls, self.bytes, self.seconds = 0, 0, 0.0

    def allreduce_mean(self, buf: np.ndarray) -> np.ndarray:
        """Elementwise mean of ``buf`` over all ranks (ring reduce-scatter + all-gather)."""
        t0 = time.perf_counter()
        group, rank, w = self.group, self.rank, self.world_size
        work = np.array(buf, dtype=np.float64, copy=True).reshape(-1)
        self.calls += 1
        self.bytes += work.nbytes
        if w == 1:
            self.seconds += time.perf_counter() - t0
            return work
        group._work[rank] = work
        group._barrier.wait()
        for other in group._work:
            if other.size != work.size:
                group._barrier.abort()
                raise ValueError("allreduce: buffer length differs across ranks")
        bounds = np.linspace(0, work.size, w + 1).astype(np.int64)
        left = group._work[(rank - 1) % w]

        def chunk(arr, c):
            c %= w
            return arr[bounds[c] : bounds[c + 1]]

        for t in range(w - 1):
            mine = chunk(work, rank - 1 - t)
            mine += chunk(left, rank - 1 - t)
            group._barrier.wait()
        for t in range(w - 1):
            chunk(work, rank - t)[...] = chunk(left, rank - t)
            group._barrier.wait()
        work /= w
        group._barrier.wait()
        group._work[rank] = None
        self.seconds += time.perf_counter() - t0
        return work


def allreduce_coalesced(flat: np.ndarray, comm: Communicator) -> np.ndarray:
    """Average a flattened gradient buffer across ranks with one collective."""
    return comm.allreduce_mean(flat)


def allreduce_per_tensor(grads: Sequence[np.ndarray], comm: Communicator) -> list[np.ndarray]:
    """Average each gradient tensor across ranks, one collective per tensor."""
    return [comm.allreduce_mean(g).reshape(np.shape(g)) for g in grads]


# --- optimizer -------------------------------------------------------------

class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size))


def adam_step(params: ModelParams, grads: np.ndarray, state: AdamState, lr: float) -> ModelParams:
    """In-place Adam update of ``params.flat``."""
    if grads.shape != params.flat.shape or state.m.shape != grads.shape:
        raise ValueError("gradient / optimizer state shape does not match the parameters")
    if not np.all(np.isfinite(grads)):
        bad = int(np.flatnonzero(~np.isfinite(grads))[0])
        name = next(s.name for s in params.manifest if s.offset <= bad < s.offset + s.size)
        raise NonFiniteGradient(f"non-finite gradient in {name} (flat index {bad}); step rejected")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grads
    state.v *= b2
    state.v += (1.0 - b2) * grads * grads
    m_hat = state.m / (1.0 - b1**state.step)
    v_hat = state.v / (1.0 - b2**state.step)
    params.flat -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


# --- workers ---------------------------------------------------------------

@dataclass
class Shard:
    """One worker's input for one step."""

    adjacency: object
    node_features: np.ndarray
    edge_features: np.ndarray
    labels: np.ndarray
    loss_weights: np.ndarray | None = None

    @property
    def n_loss_edges(self) -> int:
        if self.loss_weights is None:
            return self.adjacency.nnz
        return int(np.count_nonzero(self.loss_weights))


def shard_from_batch(batch: SampledBatch, roots_only: bool = False) -> Shard:
    weights = None
    if roots_only:
        is_root = np.zeros(batch.n_vertices, dtype=bool)
        is_root[batch.roots_local] = True
        adj = batch.adjacency
        weights = (is_root[adj.rows] | is_root[adj.cols]).astype(np.float64)
    return Shard(batch.adjacency, batch.node_features, batch.edge_features, batch.edge_labels, weights)


def shard_from_event(event: EventGraph) -> Shard:
    return Shard(event.adjacency(), event.node_features, event.edge_features, event.labels)


def split_components(batch: SampledBatch, parts: int) -> list[SampledBatch]:
    """Contiguous, near-equal split of a batch's components (one per worker)."""
    cuts = np.linspace(0, batch.n_components, parts + 1).round().astype(int)
    return [batch.select_components(a, b) for a, b in zip(cuts[:-1], cuts[1:])]


def shard_loss_and_grad(params: ModelParams, shard: Shard, pos_weight: float, timer: dict | None = None):
    """Local mean loss and flat gradient; (0, zeros) if the shard has no loss edges."""
    if shard.n_loss_edges == 0:
        return 0.0, np.zeros(params.size), False
    t0 = time.perf_counter()
    tape = Tape()
    weights = params.bind(tape)
    logits = ignn_forward(shard.adjacency, shard.node_features, shard.edge_features, params, tape, weights)
    loss = bce_with_logits(logits, shard.labels, pos_weight, shard.loss_weights)
    t1 = time.perf_counter()
    grads = tape.backward(loss)
    flat = np.empty(params.size)
    for spec in params.manifest:
        flat[spec.offset : spec.offset + spec.size] = grads[weights[spec.name]].reshape(-1)
    t2 = time.perf_counter()
    if timer is not None:
        timer["forward"] += t1 - t0
        timer["backward"] += t2 - t1
    return float(loss.data[0, 0]), flat, True


class Workers:
    """W parameter replicas with optimizer states and communicators."""

    def __init__(self, params: ModelParams, cfg: TrainConfig, use_comm: bool = True):
        self.cfg = cfg
        self.world_size = cfg.workers
        self.replicas = [params] + [params.copy() for _ in range(cfg.workers - 1)]
        self.states = [AdamState.zeros(params.size) for _ in range(cfg.workers)]
        self.comms = RingGroup(cfg.workers).communicators() if use_comm else None
        self.timers = [dict.fromkeys(PHASES, 0.0) for _ in range(cfg.workers)]
        self._pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None

    @property
    def params(self) -> ModelParams:
        return self.replicas[0]

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def allreduce_calls(self) -> int:
        return self.comms[0].calls if self.comms else 0

    def _reduce(self, rank: int, flat: np.ndarray) -> np.ndarray:
        if self.comms is None:
            if self.world_size != 1:
                raise RuntimeError("more than one worker requires a communicator")
            return flat
        comm = self.comms[rank]
        if self.cfg.coalesce:
            return allreduce_coalesced(flat, comm)
        params = self.replicas[rank]
        parts = [flat[s.offset : s.offset + s.size].reshape(s.shape) for s in params.manifest]
        reduced = allreduce_per_tensor(parts, comm)
        return np.concatenate([r.reshape(-1) for r in reduced])

    def _rank_step(self, rank: int, shard: Shard | None, n_active: int) -> float:
        timer = self.timers[rank]
        params = self.replicas[rank]
        if shard is None:
            loss, flat, active = 0.0, np.zeros(params.size), False
        else:
            loss, flat, active = shard_loss_and_grad(params, shard, self.cfg.pos_weight, timer)
        t0 = time.perf_counter()
        grad = self._reduce(rank, flat)
        # idle ranks contributed zeros; rescale the mean to the active ranks
        if 0 < n_active < self.world_size:
            grad *= self.world_size / n_active
        t1 = time.perf_counter()
        if n_active > 0:
            adam_step(params, grad, self.states[rank], self.cfg.learning_rate)
        t2 = time.perf_counter()
        timer["allreduce"] += t1 - t0
        timer["optimizer"] += t2 - t1
        return loss if active else float("nan")

    def step(self, shards: Sequence[Shard | None]) -> float:
        """One synchronous data-parallel step; returns the mean local loss."""
        if len(shards) != self.world_size:
            raise ValueError("one shard per worker required")
        n_active = sum(1 for s in shards if s is not None and s.n_loss_edges > 0)
        if self._pool is None:
            losses = [self._rank_step(0, shards[0], n_active)]
        else:
            futures = [self._pool.submit(self._rank_step, r, s, n_active) for r, s in enumerate(shards)]
            losses = [f.result() for f in futures]
        vals = [l for l in losses if not np.isnan(l)]
        return float(np.mean(vals)) if vals else float("nan")

    def reset_timers(self) -> None:
        for t in self.timers:
            t.update(dict.fromkeys(PHASES, 0.0))
        if self.comms:
            for c in self.comms:
                c.reset_counters()


# --- epochs ----------------------------------------------------------------

@dataclass
class EpochMetrics:
    epoch: int
    mode: str
    loss: float
    steps: int
    skipped_graphs: int = 0
    allreduce_calls: int = 0
    val_precision: float | None = None
    val_recall: float | None = None
    times: dict = field(default_factory=dict)
    wall: float = 0.0

    @property
    def t_train(self) -> float:
        return sum(self.times.get(k, 0.0) for k in ("forward", "backward", "allreduce", "optimizer"))


def prepare_events(events: Sequence[EventGraph], symmetrize: bool = True) -> list[SamplingGraph]:
    return [
        prepare_graph(e.csr(), symmetrize, e.node_features, e.edge_features, e.labels) for e in events
    ]


def epoch_batches(events: Sequence[EventGraph], cfg: TrainConfig, epoch: int):
    """Yield (event index, [root arrays]) groups of up to ``bulk`` batches.

    Events are visited in a per-epoch shuffled order; each event's vertices
    are permuted and cut into batches of ``batch_size`` roots.
    """
    order = np.random.default_rng([cfg.seed, epoch]).permutation(len(events))
    for ei in order.tolist():
        n = events[ei].n
        perm = np.random.default_rng([cfg.seed, epoch, ei, 0xB00]).permutation(n)
        batches = [perm[i : i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]
        for j in range(0, len(batches), cfg.bulk):
            yield ei, batches[j : j + cfg.bulk]


def batch_rngs(cfg: TrainConfig, epoch: int, first: int, count: int) -> list[np.random.Generator]:
    return [np.random.default_rng([cfg.seed, epoch, first + i]) for i in range(count)]


def sample_epoch(events, graphs, cfg: TrainConfig, epoch: int):
    """Yield (event index, SampledBatch) in training order."""
    scfg = cfg.sampler()
    batch_index = 0
    for ei, roots in epoch_batches(events, cfg, epoch):
        sampled = bulk_shadow(graphs[ei], roots, scfg, batch_rngs(cfg, epoch, batch_index, len(roots)))
        batch_index += len(roots)
        for b in sampled:
            yield ei, b


def train_epoch_minibatch(events, workers: Workers, cfg: TrainConfig, epoch: int, graphs=None) -> EpochMetrics:
    if not events or any(e.n == 0 for e in events):
        raise ValueError("minibatch training needs nonempty event graphs")
    graphs = graphs if graphs is not None else prepare_events(events, cfg.symmetrize)
    workers.reset_timers()
    scfg = cfg.sampler()
    start = time.perf_counter()
    losses, steps, batch_index = [], 0, 0
    t_sample = 0.0
    for ei, roots in epoch_batches(events, cfg, epoch):
        t0 = time.perf_counter()
        sampled = bulk_shadow(graphs[ei], roots, scfg, batch_rngs(cfg, epoch, batch_index, len(roots)))
        t_sample += time.perf_counter() - t0
        batch_index += len(roots)
        for batch in sampled:
            shards = [shard_from_batch(b, cfg.roots_only_loss) for b in split_components(batch, cfg.workers)]
            loss = workers.step(shards)
            if not np.isnan(loss):
                losses.append(loss)
            steps += 1
    wall = time.perf_counter() - start
    times = dict(workers.timers[0])
    times["sample"] = t_sample
    return EpochMetrics(epoch, "minibatch", float(np.mean(losses)) if losses else float("nan"), steps,
                        0, workers.allreduce_calls(), times=times, wall=wall)


def activation_elements(event: EventGraph, cfg: TrainConfig) -> int:
    return event.m * cfg.hidden * cfg.layers


def train_epoch_fullgraph(events, workers: Workers, cfg: TrainConfig, epoch: int) -> EpochMetrics:
    """One step per event graph (one graph per worker per step)."""
    workers.reset_timers()
    start = time.perf_counter()
    order = np.random.default_rng([cfg.seed, epoch]).permutation(len(events))
    kept, skipped = [], 0
    for ei in order.tolist():
        if activation_elements(events[ei], cfg) > cfg.activation_budget:
            skipped += 1
        else:
            kept.append(events[ei])
    if skipped:
        log.warning("skipped %d of %d graphs above the activation budget", skipped, len(events))
    losses, steps = [], 0
    w = cfg.workers
    for i in range(0, len(kept), w):
        group = [shard_from_event(e) for e in kept[i : i + w]]
        group += [None] * (w - len(group))
        loss = workers.step(group)
        if not np.isnan(loss):
            losses.append(loss)
        steps += 1
    wall = time.perf_counter() - start
    times = dict(workers.timers[0])
    return EpochMetrics(epoch, "fullgraph", float(np.mean(losses)) if losses else float("nan"), steps,
                        skipped, workers.allreduce_calls(), times=times, wall=wall)


def evaluate_events(params: ModelParams, events, threshold: float = 0.5):
    """Full-graph inference; returns (micro-averaged metrics, per-event logits)."""
    logits = [predict_logits(params, e.adjacency(), e.node_features, e.edge_features) for e in events]
    per_event = [precision_recall(classify_edges(z, threshold), e.labels, threshold) for z, e in zip(logits, events)]
    return micro_average(per_event), logits


def fit(
    train: Sequence[EventGraph],
    val: Sequence[EventGraph],
    cfg: TrainConfig,
    params: ModelParams | None = None,
    callback: Callable[[EpochMetrics], None] | None = None,
    use_comm: bool = True,
) -> tuple[ModelParams, list[EpochMetrics]]:
    if not train:
        raise ValueError("no training events")
    if params is None:
        arch = cfg.architecture(train[0].node_features.shape[1], train[0].edge_features.shape[1])
        params = init_params(arch, np.random.default_rng([cfg.seed, 0xA11]))
    workers = Workers(params, cfg, use_comm)
    graphs = prepare_events(train, cfg.symmetrize) if cfg.mode == "minibatch" else None
    history = []
    try:
        for epoch in range(cfg.epochs):
            if cfg.mode == "minibatch":
                metrics = train_epoch_minibatch(train, workers, cfg, epoch, graphs)
            else:
                metrics = train_epoch_fullgraph(train, workers, cfg, epoch)
            if val:
                em, _ = evaluate_events(workers.params, val, cfg.threshold)
                metrics.val_precision, metrics.val_recall = em.precision, em.recall
            history.append(metrics)
            log.info("epoch %d %s loss=%.4f P=%s R=%s", epoch, cfg.mode, metrics.loss,
                     metrics.val_precision, metrics.val_recall)
            if callback is not None:
                callback(metrics)
    finally:
        workers.close()
    return workers.params, history
