"""Run one ablation axis over a few seeds and print the final held-out losses.

    python demos/ablation_summary.py arch 800 0,1,2
"""

import sys

import numpy as np

from bagel_toy.model import ModelConfig
from bagel_toy.trainer import TrainConfig, run_ablation

axis = sys.argv[1] if len(sys.argv) > 1 else "arch"
steps = int(sys.argv[2]) if len(sys.argv) > 2 else 800
seeds = [int(s) for s in (sys.argv[3] if len(sys.argv) > 3 else "0,1,2").split(",")]
lr = 4e-3 if axis == "lr" else 3e-3

results = run_ablation(axis, ModelConfig(), TrainConfig(total_steps=steps, lr=lr), seeds,
                       out_dir=f"runs/ablation_{axis}")
arms = list(next(iter(results.values())))
print(f"{'arm':>8} " + " ".join(f"seed{s:<2} ce    mse   " for s in seeds) + " mean mse")
for arm in arms:
    finals = [results[s][arm].final for s in seeds]
    cells = " ".join(f"{f['ce']:.4f} {f['mse']:.4f}" for f in finals)
    print(f"{arm:>8} {cells}  {np.mean([f['mse'] for f in finals]):.4f}")
