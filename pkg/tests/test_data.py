import json

import numpy as np
import pytest

from shadowtrk.data import (
    EventFormatError,
    EventGraph,
    GenConfig,
    generate_dataset,
    generate_event,
    load_dataset,
    preset,
    read_event,
    split_dataset,
    write_dataset,
    write_event,
)
from shadowtrk.tracks import connected_components

from helpers import dfs_partition


def test_single_track_path():
    cfg = GenConfig(n_tracks=1, hits_per_track=(4, 4), detector_layers=6, noise_hits=0, false_edge_factor=0.0)
    ev = generate_event(cfg, np.random.default_rng(0))
    assert ev.n == 4 and ev.m == 3
    assert ev.labels.tolist() == [1, 1, 1]
    parts = dfs_partition(4, zip(ev.src.tolist(), ev.dst.tolist()))
    assert parts == {frozenset(range(4))}


def test_false_edge_factor_one():
    cfg = GenConfig(n_tracks=40, noise_hits=50, false_edge_factor=1.0)
    ev = generate_event(cfg, np.random.default_rng(1))
    n_true = int(ev.labels.sum())
    assert abs((ev.m - n_true) - n_true) <= 1


def test_true_edges_form_track_paths():
    cfg = GenConfig(n_tracks=30, noise_hits=40)
    ev = generate_event(cfg, np.random.default_rng(2))
    true = ev.labels.astype(bool)
    ts = connected_components(ev.adjacency(), true, min_track_len=1)
    assert ts.n_components == cfg.n_tracks + cfg.noise_hits
    # every vertex has at most one true in-edge and one true out-edge (simple paths)
    assert np.bincount(ev.src[true], minlength=ev.n).max() <= 1
    assert np.bincount(ev.dst[true], minlength=ev.n).max() <= 1


def test_labels_recoverable_from_membership():
    ev = generate_event(GenConfig(n_tracks=25, noise_hits=30), np.random.default_rng(3))
    same = (ev.particle[ev.src] == ev.particle[ev.dst]) & (ev.particle[ev.src] >= 0)
    assert np.array_equal(same.astype(int), ev.labels.astype(int))


def test_ex3_preset_sizes():
    ev = generate_event(preset("ex3"), np.random.default_rng(0))
    assert abs(ev.n - 13_000) / 13_000 < 0.10
    assert abs(ev.m - 47_800) / 47_800 < 0.10
    assert ev.node_features.shape[1] == 6 and ev.edge_features.shape[1] == 2


def test_infeasible_geometry():
    with pytest.raises(ValueError):
        GenConfig(hits_per_track=(6, 12), detector_layers=10)
    with pytest.raises(ValueError):
        GenConfig(f_v=2)


def test_event_invariants_enforced():
    with pytest.raises(ValueError):
        EventGraph("x", 2, [0], [0], np.zeros((2, 3)), np.zeros((1, 1)), [1])
    with pytest.raises(ValueError):
        EventGraph("x", 2, [0, 0], [1, 1], np.zeros((2, 3)), np.zeros((2, 1)), [1, 1])


def test_round_trip(tmp_path):
    ev = generate_event(GenConfig(n_tracks=10, noise_hits=10), np.random.default_rng(4), "e1")
    write_event(tmp_path / "e.json", ev)
    back = read_event(tmp_path / "e.json")
    assert back.same_as(ev)
    np.testing.assert_array_equal(back.node_features, ev.node_features)
    write_event(tmp_path / "again.json", back)
    assert (tmp_path / "e.json").read_bytes() == (tmp_path / "again.json").read_bytes()


def test_empty_edge_event(tmp_path):
    ev = EventGraph("empty", 3, [], [], np.ones((3, 6)), np.zeros((0, 2)), [])
    write_event(tmp_path / "e.json", ev)
    back = read_event(tmp_path / "e.json")
    assert back.m == 0 and back.n == 3


def test_corrupt_length_rejected(tmp_path):
    ev = generate_event(GenConfig(n_tracks=5, noise_hits=5), np.random.default_rng(5))
    doc = json.loads(json.dumps(json.loads(open_event_text(tmp_path, ev))))
    doc["num_edges"] += 1
    (tmp_path / "bad.json").write_text(json.dumps(doc))
    with pytest.raises(EventFormatError, match="num_edges"):
        read_event(tmp_path / "bad.json")


def test_truncated_file_position(tmp_path):
    ev = generate_event(GenConfig(n_tracks=5, noise_hits=5), np.random.default_rng(6))
    text = open_event_text(tmp_path, ev)
    (tmp_path / "t.json").write_text(text[: len(text) // 2])
    with pytest.raises(EventFormatError, match="char"):
        read_event(tmp_path / "t.json")


def test_version_mismatch(tmp_path):
    ev = generate_event(GenConfig(n_tracks=5, noise_hits=5), np.random.default_rng(7))
    doc = json.loads(open_event_text(tmp_path, ev))
    doc["format_version"] = 99
    (tmp_path / "v.json").write_text(json.dumps(doc))
    with pytest.raises(EventFormatError, match="format_version"):
        read_event(tmp_path / "v.json")


def open_event_text(tmp_path, ev):
    write_event(tmp_path / "src.json", ev)
    return (tmp_path / "src.json").read_text()


@pytest.mark.parametrize("n,expected", [(100, (80, 10, 10)), (10, (8, 1, 1)), (3, (1, 1, 1))])
def test_split_sizes(n, expected):
    tr, va, te = split_dataset(list(range(n)), 0)
    assert (len(tr), len(va), len(te)) == expected
    assert set(tr) | set(va) | set(te) == set(range(n))
    assert split_dataset(list(range(n)), 0) == (tr, va, te)


def test_split_needs_three():
    with pytest.raises(ValueError):
        split_dataset([1, 2], 0)


def test_generation_deterministic_and_dataset_io(tmp_path):
    cfg = GenConfig(n_tracks=8, noise_hits=6, seed=3)
    a = generate_dataset(cfg, 5)
    b = generate_dataset(cfg, 5)
    assert all(x.same_as(y) for x, y in zip(a, b))
    write_dataset(tmp_path / "d", a, 3)
    loaded = load_dataset(tmp_path / "d")
    assert sum(len(v) for v in loaded.values()) == 5
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert {e["split"] for e in manifest["events"]} == {"train", "val", "test"}


def test_load_dataset_missing(tmp_path):
    with pytest.raises(EventFormatError):
        load_dataset(tmp_path)
