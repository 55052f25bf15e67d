"""
Data-parallel training with a ring all-reduce
=============================================

Workers are threads, each with its own copy of the weights. After every
step their gradients are averaged with a ring all-reduce. Packing every
gradient into one buffer needs one collective per step; reducing tensor by
tensor needs one per parameter tensor.
"""

import numpy as np

from shadowtrk import cli
from shadowtrk.data import generate_dataset, preset
from shadowtrk.ignn import init_params
from shadowtrk.trainer import TrainConfig, fit

events = generate_dataset(preset("ex3-mini", n_tracks=8, noise_hits=8, seed=5), 4)
base = dict(batch_size=16, epochs=2, hidden=8, layers=2, workers=4, seed=5)
arch = TrainConfig(**base).architecture(events[0].node_features.shape[1], events[0].edge_features.shape[1])

results = {}
for coalesce in (True, False):
    params = init_params(arch, np.random.default_rng(0))
    results[coalesce] = fit(events, [], TrainConfig(coalesce=coalesce, **base), params)

for coalesce, (params, hist) in results.items():
    h = hist[-1]
    print(f"coalesce={coalesce}: {h.allreduce_calls / h.steps:.0f} all-reduce calls per step")
drift = np.max(np.abs(results[True][0].flat - results[False][0].flat))
print(f"largest weight difference between the two runs: {drift:.1e}")

# %%
# Timing both paths on gradient tensors shaped like the default model.
shapes = [s.shape for s in init_params(TrainConfig().architecture(6, 2), np.random.default_rng(0)).manifest]
for row in cli.bench_allreduce([2, 4], shapes, steps=10, seed=0):
    print(f"W={row['workers']} {row['path']:>10}: {row['calls_per_step']:3d} calls, "
          f"median {row['median_step_s'] * 1e3:.2f} ms per step")
