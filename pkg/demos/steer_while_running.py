"""Mid-episode objective switch: the scenario behind the steering UI.

A single policy drives the cart to x=-1, then the target jumps to x=+1
while the episode keeps running. The pole weight omega_theta decides what
happens to the pole on the way over: low weight lets the policy swing the
pole through to get there fast, high weight keeps it upright and slow.

Uses a freshly trained quick policy by default, so the behaviors are
rough; point POLICY_DIR at a converged checkpoint for the clean effect.
"""
import os

from vop.dataset import generate_batch
from vop.ensemble import train_ensemble
from vop.evaluate import objective_switch_scenario, save_trajectory_csv
from vop.trainer import TrainConfig, load_policy, train_policy

POLICY_DIR = os.environ.get("POLICY_DIR", "")

if POLICY_DIR:
    policy, _ = load_policy(POLICY_DIR)
    print(f"loaded policy from {POLICY_DIR}")
else:
    print("no POLICY_DIR given, training a quick one (about a minute)")
    batch = generate_batch(40, 250, seed=0)
    model, _ = train_ensemble(batch, k=2, epochs=20, seed=0)
    cfg = TrainConfig(population=300, minibatch=50, epochs=20,
                      plateau_tol=0.0, curve_sample=100)
    policy, _ = train_policy(model, batch, cfg)

for omega_theta in (1.0, 3.0):
    res = objective_switch_scenario(policy, omega_theta=omega_theta)
    csv = f"scenario_ot{omega_theta:g}.csv"
    save_trajectory_csv(csv, res.states, res.actions, res.rewards, res.omegas)
    print(f"\nomega_theta = {omega_theta:g}  (switch at step {res.switch_step})")
    print(f"  reached new target: {res.reached_target}"
          f"  (first at step {res.first_reach_step})")
    print(f"  pole held upright after switch: {res.held_pole}")
    print(f"  pole swung through: {res.swung_through}")
    print(f"  trajectory written to {csv}")
