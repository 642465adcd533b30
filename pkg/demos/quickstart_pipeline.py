"""End-to-end pipeline at toy scale: batch -> ensemble -> policy -> grid.

Runs in about a minute on a laptop. The numbers are nowhere near the
reference experiment (that needs the full 1000x250 batch, k=8 and a few
hundred epochs; use the vop CLI for that) but every stage is the real code
path, so this is the fastest way to see the moving parts fit together.
"""
import time

import numpy as np

from vop.cartpole import Objective
from vop.dataset import generate_batch
from vop.ensemble import model_report, train_ensemble
from vop.evaluate import evaluate_grid
from vop.trainer import TrainConfig, train_policy

t0 = time.time()

# 1. offline batch: uniform random actions, nothing else ever touches the env
batch = generate_batch(episodes=40, steps=250, seed=0)
print(f"batch: {len(batch)} transitions ({time.time()-t0:.0f}s)")

# 2. small dynamics ensemble on one-step deltas
model, mses = train_ensemble(batch, k=2, epochs=20, seed=0)
print(f"ensemble holdout MSEs: {[f'{m:.4f}' for m in mses]}")

report = model_report(model, batch, horizons=(1, 10, 65))
print("one-step RMSE per dim (x, theta, x_dot, theta_dot):",
      [f"{v:.4f}" for v in report.one_step_rmse])
for h in (1, 10, 65):
    print(f"  open-loop drift at h={h}: {np.mean(report.drift[h]):.4f}")

# 3. short policy training run; the objective is part of the policy input,
#    so one net covers the whole (omega_x, omega_theta) box
cfg = TrainConfig(horizon=65, population=300, minibatch=50, epochs=15,
                  plateau_tol=0.0, curve_sample=100, seed=0)
policy, curve = train_policy(model, batch, cfg)
print("virtual return over epochs:",
      " ".join(f"{p.mean_virtual_return:.0f}" for p in curve[::3]))

# 4. the four-objective grid plus a resampled-objective row
grid = evaluate_grid([policy], model, n_starts=20, steps=250, seed=0)
print(f"\n{'objective':>10} {'real':>8} {'virtual':>8}")
for row in grid.rows:
    print(f"{row.label:>10} {row.real_mean:8.1f} {row.virtual_mean:8.1f}")
print(f"\ntotal {time.time()-t0:.0f}s")
