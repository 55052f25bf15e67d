import numpy as np
import pytest

from shadowtrk.tracks import (
    EdgeMetrics,
    classify_edges,
    connected_components,
    micro_average,
    precision_recall,
    sigmoid,
    threshold_sweep,
)

from helpers import coo, dfs_partition


def partition_of(ts):
    parts = {}
    for v, c in enumerate(ts.vertex_component.tolist()):
        parts.setdefault(c, set()).add(v)
    return {frozenset(p) for p in parts.values()}


def test_threshold_half_is_logit_sign():
    z = np.array([-2.0, -1e-12, 0.0, 1e-12, 3.0])
    assert classify_edges(z, 0.5).tolist() == [False, False, True, True, True]


def test_threshold_extremes():
    z = np.array([-50.0, 0.0, 50.0])
    assert classify_edges(z, 0.0).all()
    assert not classify_edges(z, 1.0).any()


def test_classify_matches_sigmoid_definition():
    rng = np.random.default_rng(0)
    z = rng.standard_normal(500) * 4
    for t in (0.1, 0.3, 0.77, 0.9):
        assert np.array_equal(classify_edges(z, t), sigmoid(z) >= t) or \
            np.sum(classify_edges(z, t) != (sigmoid(z) >= t)) <= 1  # boundary rounding only


def test_mask_monotone_in_threshold():
    rng = np.random.default_rng(1)
    z = rng.standard_normal(300) * 3
    counts = [classify_edges(z, t).sum() for t in np.linspace(0, 1, 41)]
    assert all(a >= b for a, b in zip(counts, counts[1:]))


def test_classify_rejects_nan():
    with pytest.raises(ValueError):
        classify_edges([np.nan], 0.5)


def test_empty_mask_singletons():
    adj = coo(4, [0, 1], [1, 2])
    ts = connected_components(adj, np.zeros(2, bool), min_track_len=1)
    assert ts.n_components == 4
    assert ts.vertex_component.tolist() == [0, 1, 2, 3]


def test_full_mask_path_one_component():
    adj = coo(5, [0, 1, 2, 3], [1, 2, 3, 4])
    ts = connected_components(adj, np.ones(4, bool))
    assert ts.n_components == 1
    assert [t.tolist() for t in ts.tracks] == [[0, 1, 2, 3, 4]]


def test_component_ids_by_smallest_vertex_and_min_len():
    adj = coo(7, [5, 1, 4], [6, 3, 0])
    ts = connected_components(adj, np.ones(3, bool), min_track_len=2)
    # components {0,4}, {1,3}, {2}, {5,6}
    assert ts.vertex_component.tolist() == [0, 1, 2, 1, 0, 3, 3]
    assert [t.tolist() for t in ts.tracks] == [[0, 4], [1, 3], [5, 6]]


def test_mask_length_checked():
    with pytest.raises(ValueError):
        connected_components(coo(3, [0], [1]), np.ones(2, bool))


@pytest.mark.parametrize("seed", range(100))
def test_components_match_dfs(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 51))
    m = int(rng.integers(0, 2 * n + 1))
    src = rng.integers(0, n, m)
    dst = rng.integers(0, n, m)
    mask = rng.random(m) < 0.6
    adj = coo(n, src, dst)
    ts = connected_components(adj, mask, min_track_len=1)
    assert partition_of(ts) == dfs_partition(n, zip(src[mask].tolist(), dst[mask].tolist()))
    # edge order and duplicates do not matter
    perm = rng.permutation(m)
    ts2 = connected_components(coo(n, np.r_[src[perm], src], np.r_[dst[perm], dst]), np.r_[mask[perm], mask], 1)
    assert np.array_equal(ts.vertex_component, ts2.vertex_component)


def test_precision_recall_cases():
    y = np.array([1, 0, 1, 1, 0])
    m = precision_recall(y.astype(bool), y)
    assert m.precision == 1.0 and m.recall == 1.0
    m = precision_recall(np.ones(5, bool), y)
    assert m.recall == 1.0 and m.precision == pytest.approx(3 / 5)
    m = EdgeMetrics(2, 1, 1)
    assert m.precision == pytest.approx(2 / 3) and m.recall == pytest.approx(2 / 3)


def test_undefined_rates_are_none():
    m = precision_recall(np.zeros(3, bool), np.zeros(3))
    assert m.recall is None and m.precision is None


def test_micro_average_sums_counts():
    a = EdgeMetrics(1, 0, 0)
    b = EdgeMetrics(1, 3, 1)
    total = micro_average([a, b])
    assert (total.true_positives, total.false_positives, total.false_negatives) == (2, 3, 1)
    assert total.precision == pytest.approx(2 / 5)  # not the mean of 1.0 and 0.25


def test_recall_non_increasing_in_threshold():
    rng = np.random.default_rng(2)
    logits = [rng.standard_normal(50) * 2 for _ in range(3)]
    labels = [rng.integers(0, 2, 50) for _ in range(3)]
    sweep = threshold_sweep(logits, labels, np.linspace(0.05, 0.95, 19))
    recalls = [m.recall for m in sweep]
    assert all(a >= b for a, b in zip(recalls, recalls[1:]))
