"""Training a victim localization network on synthetic fingerprints.

A reduced 4x4 grid keeps this demo around a minute. The full desk-scale
experiment (6x6 grid, 250 samples per spot) runs through the command line:
`fooloc all`.
"""

import time

import numpy as np

from fooloc import TrainConfig, build_grid, train_localizer
from fooloc.harness import synthesize_datasets

AREA = (0.0, 9.0, 0.0, 9.0)

grid = build_grid(AREA, spacing=2.0, counts=(4, 4))
print(f"grid: {len(grid.a_spots)} training spots, {len(grid.b_spots)} attack spots, "
      f"spacing {grid.spacing} m")

channel_cfg = dict(k_subcarriers=56, n_antennas=2, noise_sigma=0.002,
                   reciprocity_sigma=0.05, reflector_range=(10, 14),
                   samples_per_spot=120)
datasets, reflectors = synthesize_datasets(grid, channel_cfg, master_seed=7)
x, y = datasets["train"].arrays()
print(f"training data: {x.shape[0]} uplink samples of shape {x.shape[1:]}")

t0 = time.time()
model = train_localizer("dnn_a", (x, y),
                        TrainConfig(epochs=10, batch_size=64, learning_rate=0.1, seed=5),
                        AREA)
print(f"trained dnn_a in {time.time() - t0:.0f}s, "
      f"validation median error {model.validation_median_le:.3f} m")

# how well does it generalize to the off-grid attack spots?
for sid in list(datasets["eval"].spots)[:4]:
    spot = datasets["eval"].spots[sid]
    preds = model.forward_batch(spot.amps)
    les = np.linalg.norm(preds - np.asarray(spot.location), axis=1)
    print(f"  {sid} at {spot.location}: median LE {np.median(les):.2f} m, "
          f"90th {np.percentile(les, 90):.2f} m")
