"""
Training an edge classifier on sampled subgraphs
================================================

A small Interaction GNN scores every candidate edge. Training runs on
sampled minibatches; the model is then evaluated on whole event graphs
and true edges are joined into track candidates.
"""

import numpy as np

from shadowtrk.data import generate_dataset, preset, split_dataset
from shadowtrk.tracks import classify_edges, connected_components
from shadowtrk.trainer import TrainConfig, evaluate_events, fit

events = generate_dataset(preset("ex3-mini", n_tracks=20, noise_hits=15, seed=4), 30)
train, val, test = split_dataset(events, 0)
print(f"{len(train)} train / {len(val)} val / {len(test)} test events")

cfg = TrainConfig(batch_size=64, epochs=5, hidden=8, layers=3, depth=3, fanout=6, bulk=4, seed=0)


def fmt(v):
    # precision is undefined until some edge is predicted true
    return "n/a" if v is None else f"{v:.3f}"


def show(m):
    print(f"epoch {m.epoch}: loss {m.loss:.4f}  val P {fmt(m.val_precision)}  R {fmt(m.val_recall)}  "
          f"({m.steps} steps, {m.wall:.1f}s)")


params, history = fit(train, val, cfg, callback=show)

# %%
# Test-set edge metrics, then track candidates from the edges kept.
metrics, logits = evaluate_events(params, test, threshold=0.5)
print(f"test precision {fmt(metrics.precision)} recall {fmt(metrics.recall)}")

event, z = test[0], logits[0]
found = connected_components(event.adjacency(), classify_edges(z), min_track_len=3)
print(f"event {event.event_id}: {len(found.tracks)} track candidates with 3 or more hits")
print("hits per candidate:", sorted((len(t) for t in found.tracks), reverse=True)[:10])
