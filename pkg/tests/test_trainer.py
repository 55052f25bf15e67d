import threading

import numpy as np
import pytest

from shadowtrk.data import GenConfig, generate_dataset
from shadowtrk.ignn import init_params, loss_and_grad
from shadowtrk.trainer import (
    AdamState,
    NonFiniteGradient,
    RingGroup,
    TrainConfig,
    Workers,
    adam_step,
    allreduce_coalesced,
    allreduce_per_tensor,
    fit,
    prepare_events,
    sample_epoch,
    split_components,
    train_epoch_fullgraph,
    train_epoch_minibatch,
)

from helpers import sequential_oracle


def run_ranks(w, fn):
    """Run fn(rank, comm) on w threads; returns results by rank."""
    comms = RingGroup(w).communicators()
    out = [None] * w
    errors = []

    def target(r):
        try:
            out[r] = fn(r, comms[r])
        except Exception as exc:  # pragma: no cover - surfaced below
            errors.append(exc)

    threads = [threading.Thread(target=target, args=(r,)) for r in range(w)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    return out, comms


@pytest.fixture(scope="module")
def tiny_events():
    cfg = GenConfig(n_tracks=6, hits_per_track=(4, 6), detector_layers=6, noise_hits=5, seed=4)
    return generate_dataset(cfg, 5)


def tiny_cfg(**kw):
    base = dict(batch_size=8, epochs=1, hidden=4, layers=2, depth=2, fanout=3, seed=1)
    base.update(kw)
    return TrainConfig(**base)


def fresh_params(cfg, events):
    arch = cfg.architecture(events[0].node_features.shape[1], events[0].edge_features.shape[1])
    return init_params(arch, np.random.default_rng(123))


# --- all-reduce --------------------------------------------------------------

def test_allreduce_w1_identity():
    comm = RingGroup(1).communicators()[0]
    x = np.arange(5.0)
    np.testing.assert_array_equal(allreduce_coalesced(x, comm), x)
    assert comm.calls == 1


def test_allreduce_constant_ranks():
    out, comms = run_ranks(4, lambda r, c: allreduce_coalesced(np.full(10, float(r)), c))
    for o in out:
        np.testing.assert_array_equal(o, 1.5)
    assert [c.calls for c in comms] == [1, 1, 1, 1]


@pytest.mark.parametrize("w", [2, 3, 4])
def test_coalesced_equals_per_tensor(w):
    rng = np.random.default_rng(w)
    shapes = [(3, 4), (1, 4), (7, 2), (1, 1), (5, 5)]
    grads = [[rng.standard_normal(s) for s in shapes] for _ in range(w)]
    expected = [np.mean([grads[r][i] for r in range(w)], axis=0) for i in range(len(shapes))]

    def coalesced(r, c):
        return allreduce_coalesced(np.concatenate([g.ravel() for g in grads[r]]), c)

    def per_tensor(r, c):
        return allreduce_per_tensor(grads[r], c)

    co, co_comms = run_ranks(w, coalesced)
    pt, pt_comms = run_ranks(w, per_tensor)
    for r in range(w):
        flat_pt = np.concatenate([g.ravel() for g in pt[r]])
        assert np.max(np.abs(co[r] - flat_pt)) <= 1e-12
        np.testing.assert_allclose(flat_pt, np.concatenate([e.ravel() for e in expected]), atol=1e-12)
    assert co_comms[0].calls == 1
    assert pt_comms[0].calls == len(shapes)


def test_allreduce_length_mismatch():
    with pytest.raises(ValueError):
        run_ranks(2, lambda r, c: allreduce_coalesced(np.zeros(3 + r), c))


def test_per_tensor_call_count_equals_parameter_count(tiny_events):
    cfg = TrainConfig(workers=2, coalesce=False, batch_size=8)
    p = fresh_params(cfg, tiny_events)
    grads = [p.arrays[n] for n in p.names()]
    _, comms = run_ranks(2, lambda r, c: allreduce_per_tensor(grads, c))
    # 2 encoders + 2 MLPs per layer + head, 3 linear layers each, weight and bias
    assert comms[0].calls == len(p.names()) == (2 + 2 * 8 + 1) * 3 * 2


# --- Adam --------------------------------------------------------------------

def test_adam_zero_gradient_no_change(tiny_events):
    p = fresh_params(tiny_cfg(), tiny_events)
    before = p.flat.copy()
    adam_step(p, np.zeros(p.size), AdamState.zeros(p.size), 1e-3)
    np.testing.assert_array_equal(p.flat, before)


def test_adam_first_step_magnitude(tiny_events):
    p = fresh_params(tiny_cfg(), tiny_events)
    before = p.flat.copy()
    g = np.full(p.size, 0.37)
    adam_step(p, g, AdamState.zeros(p.size), 1e-3)
    np.testing.assert_allclose(before - p.flat, 1e-3, rtol=1e-6)


def test_adam_convex_quadratic():
    from shadowtrk.ignn import IgnnArchitecture, ModelParams

    arch = IgnnArchitecture(1, 1, 1, 1, 1)
    p = init_params(arch, np.random.default_rng(0))
    target = np.linspace(-1, 1, p.size)
    p.flat[:] = target + 3.0
    state = AdamState.zeros(p.size)
    losses = []
    for _ in range(100):
        diff = p.flat - target
        losses.append(0.5 * float(diff @ diff))
        adam_step(p, diff, state, 0.05)
    assert all(b < a for a, b in zip(losses[5:], losses[6:]))


def test_adam_rejects_non_finite(tiny_events):
    p = fresh_params(tiny_cfg(), tiny_events)
    g = np.zeros(p.size)
    g[7] = np.inf
    before = p.flat.copy()
    with pytest.raises(NonFiniteGradient, match="node_encoder"):
        adam_step(p, g, AdamState.zeros(p.size), 1e-3)
    np.testing.assert_array_equal(p.flat, before)


# --- configuration -------------------------------------------------------------

def test_config_rejects_indivisible_batch():
    with pytest.raises(ValueError, match="divisible"):
        TrainConfig(batch_size=10, workers=3)
    with pytest.raises(ValueError):
        TrainConfig(mode="sideways")


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.batch_size, cfg.hidden, cfg.epochs, cfg.layers, cfg.depth, cfg.fanout) == (256, 64, 30, 8, 3, 6)
    assert cfg.learning_rate == 1e-3


# --- epochs --------------------------------------------------------------------

def test_w1_matches_no_communicator(tiny_events):
    cfg = tiny_cfg(epochs=2)
    a, _ = fit(tiny_events, [], cfg, fresh_params(cfg, tiny_events))
    b, _ = fit(tiny_events, [], cfg, fresh_params(cfg, tiny_events), use_comm=False)
    np.testing.assert_array_equal(a.flat, b.flat)


def test_bulk_k_does_not_change_samples(tiny_events):
    graphs = prepare_events(tiny_events)
    one = [(ei, b.vertex_sets(), b.edge_ids.tolist()) for ei, b in sample_epoch(tiny_events, graphs, tiny_cfg(bulk=1), 0)]
    four = [(ei, b.vertex_sets(), b.edge_ids.tolist()) for ei, b in sample_epoch(tiny_events, graphs, tiny_cfg(bulk=4), 0)]
    assert one == four
    other_epoch = [(ei, b.vertex_sets()) for ei, b in sample_epoch(tiny_events, graphs, tiny_cfg(), 1)]
    assert other_epoch != [(ei, v) for ei, v, _ in one]


def test_ddp_w2_matches_sequential_oracle(tiny_events):
    cfg = tiny_cfg(workers=2, epochs=2)
    ddp, _ = fit(tiny_events, [], cfg, fresh_params(cfg, tiny_events))
    oracle = sequential_oracle(tiny_events, cfg, fresh_params(cfg, tiny_events), 2)
    assert np.max(np.abs(ddp.flat - oracle.flat)) <= 1e-10


def test_coalesce_flag_same_trajectory(tiny_events):
    on, hist_on = fit(tiny_events, [], tiny_cfg(workers=4, coalesce=True, epochs=2),
                      fresh_params(tiny_cfg(), tiny_events))
    off, hist_off = fit(tiny_events, [], tiny_cfg(workers=4, coalesce=False, epochs=2),
                        fresh_params(tiny_cfg(), tiny_events))
    assert np.max(np.abs(on.flat - off.flat)) <= 1e-10
    n_params = len(on.names())
    assert hist_on[0].allreduce_calls == hist_on[0].steps
    assert hist_off[0].allreduce_calls == hist_off[0].steps * n_params


def test_fullgraph_one_step_per_graph(tiny_events):
    cfg = tiny_cfg(mode="fullgraph")
    _, hist = fit(tiny_events, [], cfg, fresh_params(cfg, tiny_events))
    assert hist[0].steps == len(tiny_events) and hist[0].skipped_graphs == 0


def test_fullgraph_budget_skips_all(tiny_events, caplog):
    cfg = tiny_cfg(mode="fullgraph", activation_budget=1)
    p = fresh_params(cfg, tiny_events)
    before = p.flat.copy()
    with caplog.at_level("WARNING"):
        _, hist = fit(tiny_events, [], cfg, p)
    assert hist[0].steps == 0 and hist[0].skipped_graphs == len(tiny_events)
    assert "skipped" in caplog.text
    np.testing.assert_array_equal(p.flat, before)


def test_saturated_minibatch_equals_fullgraph_first_step():
    # a 4-vertex path: one batch covering every vertex, depth and fanout large
    # enough that each component is the whole graph
    from shadowtrk.data import EventGraph

    ev = EventGraph("p", 4, [0, 1, 2], [1, 2, 3], np.random.default_rng(0).standard_normal((4, 6)),
                    np.random.default_rng(1).standard_normal((3, 2)), [1, 0, 1])
    mb = tiny_cfg(batch_size=1, depth=3, fanout=4)
    graphs = prepare_events([ev])
    p = fresh_params(mb, [ev])
    full_loss = loss_and_grad(p, ev.adjacency(), ev.node_features, ev.edge_features, ev.labels)[0]
    for _, batch in sample_epoch([ev], graphs, mb, 0):
        assert batch.vertex_sets() == (frozenset(range(4)),)
        loss = loss_and_grad(p, batch.adjacency, batch.node_features, batch.edge_features, batch.edge_labels)[0]
        assert abs(loss - full_loss) < 1e-12
        break


def test_epoch_metrics_and_timing(tiny_events):
    cfg = tiny_cfg()
    p = fresh_params(cfg, tiny_events)
    workers = Workers(p, cfg)
    try:
        m = train_epoch_minibatch(tiny_events, workers, cfg, 0)
    finally:
        workers.close()
    assert m.steps == sum(-(-e.n // cfg.batch_size) for e in tiny_events)
    assert set(m.times) == {"sample", "forward", "backward", "allreduce", "optimizer"}
    phases = sum(m.times.values())
    assert phases <= m.wall + 1e-6
    assert m.wall - phases < 0.5 * m.wall + 0.05
    assert np.isfinite(m.loss)


def test_zero_vertex_event_rejected(tiny_events):
    from shadowtrk.data import EventGraph

    empty = EventGraph("e", 0, [], [], np.zeros((0, 6)), np.zeros((0, 2)), [])
    cfg = tiny_cfg()
    workers = Workers(fresh_params(cfg, tiny_events), cfg)
    with pytest.raises(ValueError):
        train_epoch_minibatch([empty], workers, cfg, 0)
    workers.close()


def test_fit_reproducible(tiny_events):
    cfg = tiny_cfg(epochs=2)
    a, ha = fit(tiny_events, tiny_events[:1], cfg)
    b, hb = fit(tiny_events, tiny_events[:1], cfg)
    np.testing.assert_array_equal(a.flat, b.flat)
    assert [h.loss for h in ha] == [h.loss for h in hb]
    assert ha[-1].val_recall is not None  # precision is None while nothing is predicted true
