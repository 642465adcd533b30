"""How far can you trust the learned dynamics?

Trains a small ensemble, then runs the same policy open-loop through the
models and through the real simulator from the same start, printing the
state divergence as it grows with the horizon. This is the check that
motivates capping the training rollouts at 65 steps: one-step errors are
tiny, but they compound.
"""
import numpy as np

from vop.cartpole import Objective
from vop.dataset import generate_batch
from vop.ensemble import model_report, train_ensemble
from vop.evaluate import transfer_check
from vop.trainer import policy_init

batch = generate_batch(40, 250, seed=1)
model, _ = train_ensemble(batch, k=2, epochs=20, seed=1)

report = model_report(model, batch, horizons=(1, 10, 65, 80))
print("holdout drift (mean state error after h open-loop steps):")
for h in sorted(report.drift):
    print(f"  h={h:3d}: {float(np.mean(report.drift[h])):.4f}")
print(f"fraction of horizon pairs where drift decreased: "
      f"{report.violation_fraction:.3f}")

# same story for one concrete trajectory: an untrained policy wanders,
# which is exactly the regime the random-action batch covers well
policy = policy_init(model.norm, seed=0)
res = transfer_check(policy, model, Objective(0.0, 2.0), steps=250)
print("\nvirtual vs real divergence along one rollout:")
for t in (1, 5, 10, 25, 65, 100, 250):
    print(f"  step {t:3d}: {res.divergence[t]:.4f}")
