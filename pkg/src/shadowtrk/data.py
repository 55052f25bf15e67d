"""Synthetic hit graphs, the event file format and dataset splits.

Tracks are smooth curves from near the beam line through concentric
cylindrical layers; each crossing leaves a hit. Consecutive hits of one track
are joined by true edges. False edges join hits on adjacent layers that are
spatial near-neighbors but belong to different tracks (or to noise), the
kind of candidate a fixed-radius graph-building stage lets through.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .sparse import CooMatrix, CsrMatrix

FORMAT_VERSION = 1


class EventFormatError(ValueError):
    """An event or dataset file failed to load."""


def _rows(values, count: int) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    # a (0, k) table keeps its width; reshape(0, -1) cannot infer it
    return arr if arr.ndim == 2 else arr.reshape(count, -1)


@dataclass(eq=False)
class EventGraph:
    """One collision event as a directed hit graph (inner layer to outer).

    Edges are kept sorted by (src, dst), so edge i is also CSR position i.
    ``particle`` (in memory only) is the generating track of each hit, -1 for
    noise.
    """

    event_id: str
    n: int
    src: np.ndarray
    dst: np.ndarray
    node_features: np.ndarray
    edge_features: np.ndarray
    labels: np.ndarray
    particle: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=np.int64).reshape(-1)
        self.dst = np.asarray(self.dst, dtype=np.int64).reshape(-1)
        self.node_features = _rows(self.node_features, self.n)
        self.edge_features = _rows(self.edge_features, self.src.size)
        self.labels = np.asarray(self.labels, dtype=np.int8).reshape(-1)
        self.validate()

    @property
    def m(self) -> int:
        return int(self.src.size)

    def validate(self) -> None:
        m = self.src.size
        if self.dst.size != m or self.labels.size != m or self.edge_features.shape[0] != m:
            raise ValueError(f"event {self.event_id}: edge arrays disagree on the edge count")
        if self.node_features.shape[0] != self.n:
            raise ValueError(f"event {self.event_id}: node feature rows != {self.n}")
        if m:
            if min(self.src.min(), self.dst.min()) < 0 or max(self.src.max(), self.dst.max()) >= self.n:
                raise ValueError(f"event {self.event_id}: edge endpoint out of range")
            if np.any(self.src == self.dst):
                raise ValueError(f"event {self.event_id}: self-loop")
            key = self.src * self.n + self.dst
            if np.any(np.diff(key) <= 0):
                raise ValueError(f"event {self.event_id}: edges unsorted or duplicated")
        if np.any((self.labels != 0) & (self.labels != 1)):
            raise ValueError(f"event {self.event_id}: labels must be 0/1")

    def adjacency(self) -> CooMatrix:
        return CooMatrix(self.n, self.n, self.src, self.dst, np.ones(self.m))

    def csr(self) -> CsrMatrix:
        row_ptr = np.zeros(self.n + 1, dtype=np.int64)
        np.cumsum(np.bincount(self.src, minlength=self.n), out=row_ptr[1:])
        return CsrMatrix(self.n, self.n, row_ptr, self.dst, np.ones(self.m))

    def same_as(self, other: "EventGraph") -> bool:
        return (
            self.event_id == other.event_id
            and self.n == other.n
            and np.array_equal(self.src, other.src)
            and np.array_equal(self.dst, other.dst)
            and np.array_equal(self.node_features, other.node_features)
            and np.array_equal(self.edge_features, other.edge_features)
            and np.array_equal(self.labels, other.labels)
        )


@dataclass(frozen=True)
class GenConfig:
    n_tracks: int = 90
    hits_per_track: tuple[int, int] = (6, 10)
    detector_layers: int = 10
    noise_hits: int = 200
    false_edge_factor: float = 1.5
    f_v: int = 6
    f_e: int = 2
    seed: int = 0
    curvature: float = 0.6
    slope: float = 1.0
    hit_noise: float = 0.002
    neighbors: int = 4

    def __post_init__(self):
        lo, hi = self.hits_per_track
        if self.f_v < 3 or self.f_e < 1:
            raise ValueError("need f_v >= 3 and f_e >= 1")
        if not 1 <= lo <= hi:
            raise ValueError("hits_per_track must be a range lo <= hi with lo >= 1")
        if hi > self.detector_layers:
            raise ValueError(
                f"infeasible geometry: {hi} hits per track but only {self.detector_layers} layers"
            )
        if self.n_tracks < 0 or self.noise_hits < 0 or self.false_edge_factor < 0:
            raise ValueError("counts and false_edge_factor must be nonnegative")


PRESETS = {
    # ~1K hits per event with Ex3 feature widths
    "ex3-mini": dict(n_tracks=90, hits_per_track=(6, 10), detector_layers=10, noise_hits=200,
                     false_edge_factor=1.5, f_v=6, f_e=2),
    # Ex3-sized events: ~13.0K hits, ~47.8K edges
    "ex3": dict(n_tracks=1250, hits_per_track=(8, 12), detector_layers=12, noise_hits=500,
                false_edge_factor=3.17, f_v=6, f_e=2, neighbors=8),
    # CTD feature widths at desk scale
    "ctd-mini": dict(n_tracks=120, hits_per_track=(6, 10), detector_layers=10, noise_hits=200,
                     false_edge_factor=2.0, f_v=14, f_e=8),
}


def preset(name: str, **overrides) -> GenConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return GenConfig(**{**PRESETS[name], **overrides})


def _wrap_angle(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


def generate_event(cfg: GenConfig, rng: np.random.Generator, event_id: str = "event") -> EventGraph:
    n_layers = cfg.detector_layers
    radii = np.arange(1, n_layers + 1) / n_layers
    lo, hi = cfg.hits_per_track

    layer, phi, z, particle = [], [], [], []
    for t in range(cfg.n_tracks):
        h = int(rng.integers(lo, hi + 1))
        start = int(rng.integers(0, n_layers - h + 1))
        phi0 = rng.uniform(-np.pi, np.pi)
        curv = rng.uniform(-cfg.curvature, cfg.curvature)
        slope = rng.uniform(-cfg.slope, cfg.slope)
        z0 = rng.normal(0.0, 0.002)
        ls = np.arange(start, start + h)
        r = radii[ls]
        layer.append(ls)
        phi.append(phi0 + curv * r + rng.normal(0.0, cfg.hit_noise, h))
        z.append(z0 + slope * r + rng.normal(0.0, cfg.hit_noise, h))
        particle.append(np.full(h, t))
    if cfg.noise_hits:
        ls = rng.integers(0, n_layers, cfg.noise_hits)
        layer.append(ls)
        phi.append(rng.uniform(-np.pi, np.pi, cfg.noise_hits))
        z.append(rng.uniform(-cfg.slope, cfg.slope, cfg.noise_hits) * radii[ls])
        particle.append(np.full(cfg.noise_hits, -1))
    empty = np.zeros(0)
    layer = np.concatenate(layer or [empty]).astype(np.int64)
    phi = _wrap_angle(np.concatenate(phi or [empty]))
    z = np.concatenate(z or [empty])
    particle = np.concatenate(particle or [empty]).astype(np.int64)

    # vertex ids carry no track information: order by layer, then angle
    order = np.lexsort((phi, layer))
    layer, phi, z, particle = layer[order], phi[order], z[order], particle[order]
    n = layer.size
    r = radii[layer] if n else empty
    xyz = np.column_stack([r * np.cos(phi), r * np.sin(phi), z]) if n else np.zeros((0, 3))

    # true edges: consecutive hits of each track (ids increase with layer)
    on_track = particle >= 0
    ids = np.flatnonzero(on_track)
    by_track = ids[np.lexsort((layer[ids], particle[ids]))]
    same = particle[by_track[1:]] == particle[by_track[:-1]]
    t_src, t_dst = by_track[:-1][same], by_track[1:][same]
    n_true = t_src.size

    # false-edge pool: nearest hits on the next layer that are not the true successor
    cand_src, cand_dst, cand_d = [], [], []
    for l in range(n_layers - 1):
        inner = np.flatnonzero(layer == l)
        outer = np.flatnonzero(layer == l + 1)
        if inner.size == 0 or outer.size == 0:
            continue
        k = min(cfg.neighbors, outer.size)
        dist, nn = cKDTree(xyz[outer]).query(xyz[inner], k=k)
        dist, nn = dist.reshape(inner.size, k), nn.reshape(inner.size, k)
        s = np.repeat(inner, k)
        d = outer[nn.reshape(-1)]
        genuine = (particle[s] == particle[d]) & (particle[s] >= 0)
        cand_src.append(s[~genuine])
        cand_dst.append(d[~genuine])
        cand_d.append(dist.reshape(-1)[~genuine])
    if cand_src:
        cs, cd, cdist = map(np.concatenate, (cand_src, cand_dst, cand_d))
    else:
        cs = cd = np.zeros(0, dtype=np.int64)
        cdist = empty
    n_false = min(int(round(cfg.false_edge_factor * n_true)), cs.size)
    pick = np.lexsort((cd, cs, cdist))[:n_false]
    f_src, f_dst = cs[pick], cd[pick]

    src = np.concatenate([t_src, f_src]).astype(np.int64)
    dst = np.concatenate([t_dst, f_dst]).astype(np.int64)
    labels = np.concatenate([np.ones(n_true), np.zeros(f_src.size)]).astype(np.int8)
    eorder = np.lexsort((dst, src))
    src, dst, labels = src[eorder], dst[eorder], labels[eorder]

    node_features = _node_features(r, phi, z, cfg.f_v, rng)
    edge_features = _edge_features(r, phi, z, src, dst, cfg.f_e, rng)
    return EventGraph(event_id, n, src, dst, node_features, edge_features, labels, particle)


def _node_features(r, phi, z, width, rng):
    n = r.size
    with np.errstate(divide="ignore", invalid="ignore"):
        cols = [r, phi / np.pi, z, np.where(r > 0, z / r, 0.0), r * np.cos(phi), r * np.sin(phi)]
    cols = cols[:width]
    while len(cols) < width:
        cols.append(rng.normal(0.0, 1.0, n))
    return np.column_stack(cols) if n else np.zeros((0, width))


def _edge_features(r, phi, z, src, dst, width, rng):
    m = src.size
    dr = r[dst] - r[src]
    dphi = _wrap_angle(phi[dst] - phi[src])
    dz = z[dst] - z[src]
    with np.errstate(divide="ignore", invalid="ignore"):
        deta = z[dst] / r[dst] - z[src] / r[src]
    # deltas over one layer spacing are ~0.1; scale to order one
    cols = [10.0 * dphi, 10.0 * dz, 10.0 * dr, 10.0 * deta][:width]
    while len(cols) < width:
        cols.append(rng.normal(0.0, 1.0, m))
    return np.column_stack(cols) if m else np.zeros((0, width))


def event_seed(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def generate_dataset(cfg: GenConfig, n_events: int) -> list[EventGraph]:
    return [generate_event(cfg, event_seed(cfg.seed, i), f"event_{i:05d}") for i in range(n_events)]


def split_dataset(events: list, seed: int) -> tuple[list, list, list]:
    """Shuffle, then 80/10/10 with at least one event in validation and test."""
    if len(events) < 3:
        raise ValueError("need at least 3 events to split")
    n = len(events)
    n_val = max(1, int(round(0.1 * n)))
    n_test = max(1, int(round(0.1 * n)))
    perm = np.random.default_rng(seed).permutation(n)
    train = [events[i] for i in perm[: n - n_val - n_test]]
    val = [events[i] for i in perm[n - n_val - n_test : n - n_test]]
    test = [events[i] for i in perm[n - n_test :]]
    return train, val, test


# --- event files -----------------------------------------------------------

def event_to_json(event: EventGraph) -> str:
    doc = {
        "format_version": FORMAT_VERSION,
        "event_id": event.event_id,
        "num_vertices": event.n,
        "num_edges": event.m,
        "edge_src": event.src.tolist(),
        "edge_dst": event.dst.tolist(),
        "node_features": event.node_features.tolist(),
        "edge_features": event.edge_features.tolist(),
        "labels": event.labels.astype(int).tolist(),
        # widths survive even when a table has no rows
        "node_feature_dim": event.node_features.shape[1],
        "edge_feature_dim": event.edge_features.shape[1],
    }
    return json.dumps(doc, separators=(",", ":"))


def write_event(path, event: EventGraph) -> None:
    Path(path).write_text(event_to_json(event) + "\n")


def read_event(path) -> EventGraph:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise EventFormatError(f"{path}: malformed or truncated at char {exc.pos}: {exc.msg}") from None
    return event_from_doc(doc, str(path))


def event_from_doc(doc: dict, where: str = "<event>") -> EventGraph:
    if not isinstance(doc, dict):
        raise EventFormatError(f"{where}: top level must be an object")
    if doc.get("format_version") != FORMAT_VERSION:
        raise EventFormatError(
            f"{where}: format_version {doc.get('format_version')!r}, expected {FORMAT_VERSION}"
        )
    required = ("event_id", "num_vertices", "num_edges", "edge_src", "edge_dst", "node_features",
                "edge_features", "labels")
    for key in required:
        if key not in doc:
            raise EventFormatError(f"{where}: missing field {key!r}")
    n, m = doc["num_vertices"], doc["num_edges"]
    for key, expected in (("edge_src", m), ("edge_dst", m), ("edge_features", m), ("labels", m),
                          ("node_features", n)):
        if len(doc[key]) != expected:
            count = "num_edges" if expected is m and key != "node_features" else "num_vertices"
            raise EventFormatError(
                f"{where}: field {key!r} has {len(doc[key])} entries but {count} = {expected}"
            )
    try:
        nf = np.array(doc["node_features"], dtype=np.float64).reshape(n, doc.get("node_feature_dim", -1))
        ef = np.array(doc["edge_features"], dtype=np.float64).reshape(m, doc.get("edge_feature_dim", -1))
        return EventGraph(doc["event_id"], n, doc["edge_src"], doc["edge_dst"], nf, ef, doc["labels"])
    except ValueError as exc:
        raise EventFormatError(f"{where}: {exc}") from None


# --- datasets --------------------------------------------------------------

def write_dataset(root, events: list[EventGraph], seed: int, config: dict | None = None) -> dict:
    """Write events, ``split.json`` and ``manifest.json`` under ``root``."""
    root = Path(root)
    (root / "events").mkdir(parents=True, exist_ok=True)
    train, val, test = split_dataset(events, seed)
    split = {
        "train": [e.event_id for e in train],
        "val": [e.event_id for e in val],
        "test": [e.event_id for e in test],
    }
    assignment = {eid: name for name, ids in split.items() for eid in ids}
    entries = []
    for event in events:
        rel = f"events/{event.event_id}.json"
        write_event(root / rel, event)
        entries.append({"event_id": event.event_id, "path": rel, "split": assignment[event.event_id]})
    manifest = {
        "format_version": FORMAT_VERSION,
        "split_seed": seed,
        "generator": config or {},
        "events": entries,
    }
    (root / "split.json").write_text(json.dumps(split, indent=1) + "\n")
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def load_dataset(root, splits=("train", "val", "test")) -> dict[str, list[EventGraph]]:
    root = Path(root)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError:
        raise EventFormatError(f"{root}: no manifest.json") from None
    except json.JSONDecodeError as exc:
        raise EventFormatError(f"{root}/manifest.json: malformed at char {exc.pos}") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise EventFormatError(f"{root}/manifest.json: unsupported format_version")
    out = {name: [] for name in splits}
    for entry in manifest["events"]:
        if entry["split"] in out:
            out[entry["split"]].append(read_event(root / entry["path"]))
    return out


def gen_config_dict(cfg: GenConfig) -> dict:
    d = asdict(cfg)
    d["hits_per_track"] = list(cfg.hits_per_track)
    return d


def table_shape(events: list[EventGraph]) -> dict:
    """Average size summary in the layout of a dataset table row."""
    return {
        "graphs": len(events),
        "avg_vertices": float(np.mean([e.n for e in events])) if events else math.nan,
        "avg_edges": float(np.mean([e.m for e in events])) if events else math.nan,
        "vertex_features": events[0].node_features.shape[1] if events else 0,
        "edge_features": events[0].edge_features.shape[1] if events else 0,
    }
