"""Closed-loop evaluation of objective-conditioned policies.

Four protocols, all on the true simulator:

* objective grid: 250-step returns from a fixed shared set of random start
  states, per objective, mean and standard error across training seeds,
  with matched virtual returns (both at the 65-step training horizon and
  over the full 250 steps) for the model-consistency check;
* specialist comparison: policies trained for one fixed objective each,
  under the same budget, against the conditioned policy at that objective;
* objective switch: swing up toward x = -1, then retarget to x = +1 mid
  episode and classify the crossing behavior (pole held vs swung through);
* transfer: one paired virtual/real trajectory from a shared start with
  per-step state divergence.

Episodes within a protocol run as one vectorized batch; aggregation order
is fixed, so reports are byte-stable under fixed seeds.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .cartpole import (ACTION_LIMIT, SMOOTHING_ANGLE, X_LIMIT, EnvState,
                       Objective, env_step, env_step_array, reward,
                       reward_array, sample_initial_state, sample_objective,
                       wrap_pi)
from .ensemble import EnsembleModel, predict_mean_array
from .seeds import derive_seed
from .trainer import (PolicyModel, RolloutPopulation, TrainConfig,
                      build_population, policy_action, policy_action_array,
                      train_policy, virtual_returns)

TABLE_OBJECTIVES = (Objective(-1.0, 0.0), Objective(-1.0, 3.0),
                    Objective(0.0, 1.0), Objective(1.0, 2.0))

_START_TAG = 301
_OBJECTIVE_TAG = 302
_RANDOM_POLICY_TAG = 303
_MID_SWING_TAG = 304


def make_start_states(n: int, seed: int) -> np.ndarray:
    """The shared evaluation start-state set: (n, 4), velocities at rest."""
    rng = np.random.default_rng(derive_seed(seed, _START_TAG))
    return np.array([sample_initial_state(rng).as_array() for _ in range(n)])


def sample_eval_objectives(n: int, seed: int) -> np.ndarray:
    """Per-episode objectives for the resampled-objective grid row."""
    rng = np.random.default_rng(derive_seed(seed, _OBJECTIVE_TAG))
    return np.array([sample_objective(rng).as_array() for _ in range(n)])


def closed_loop_returns(policy: PolicyModel, starts: np.ndarray,
                        omegas: np.ndarray, steps: int = 250) -> np.ndarray:
    """Undiscounted true-environment returns, all episodes stepped as one
    batch; rewards are evaluated on successor states."""
    s = starts.copy()
    total = np.zeros(starts.shape[0])
    for _ in range(steps):
        a = policy_action_array(policy, s, omegas)
        s = env_step_array(s, a)
        total += reward_array(s, omegas)
    return total


def random_policy_returns(starts: np.ndarray, omegas: np.ndarray,
                          steps: int = 250, seed: int = 0) -> np.ndarray:
    """Returns of the batch-generating policy (i.i.d. uniform actions); the
    floor any trained policy has to clear."""
    rng = np.random.default_rng(derive_seed(seed, _RANDOM_POLICY_TAG))
    s = starts.copy()
    total = np.zeros(starts.shape[0])
    for _ in range(steps):
        a = rng.uniform(-ACTION_LIMIT, ACTION_LIMIT, size=s.shape[0])
        s = env_step_array(s, a)
        total += reward_array(s, omegas)
    return total


# ---------------------------------------------------------------------------
# Objective grid
# ---------------------------------------------------------------------------

@dataclass
class GridRow:
    label: str
    omega_x: Optional[float]        # None on the resampled-objective row
    omega_theta: Optional[float]
    real_mean: float
    real_stderr: float
    virtual_mean: float             # full-episode model rollouts
    virtual_mean_h65: float         # training-horizon model rollouts
    real_by_seed: List[float]
    virtual_by_seed: List[float]
    virtual_h65_by_seed: List[float]


@dataclass
class EvalReport:
    n_seeds: int
    n_starts: int
    steps: int
    train_horizon: int
    start_seed: int
    rows: List[GridRow]

    def row(self, label: str) -> GridRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)


def _stderr(values: Sequence[float]) -> float:
    if len(values) < 2:
        return 0.0
    return float(np.std(np.asarray(values), ddof=1) / math.sqrt(len(values)))


def objective_label(obj: Optional[Objective]) -> str:
    if obj is None:
        return "resampled"
    return f"({obj.omega_x:g},{obj.omega_theta:g})"


def evaluate_grid(policies: Sequence[PolicyModel], model: EnsembleModel,
                  objectives: Sequence[Objective] = TABLE_OBJECTIVES,
                  n_starts: int = 100, steps: int = 250,
                  train_horizon: int = 65, seed: int = 0,
                  include_resampled_row: bool = True) -> EvalReport:
    """Grid returns for independently trained policies (one per seed).

    Every row shares one fixed start-state set; the resampled row draws a
    fresh objective per episode instead of a fixed one.  Standard errors
    are across the policy seeds.
    """
    if not policies:
        raise ValueError("evaluate_grid needs at least one trained policy")
    starts = make_start_states(n_starts, seed)
    rows_spec: List[Tuple[Optional[Objective], np.ndarray]] = [
        (obj, np.tile(obj.as_array(), (n_starts, 1))) for obj in objectives]
    if include_resampled_row:
        rows_spec.append((None, sample_eval_objectives(n_starts, seed)))

    rows = []
    for obj, omegas in rows_spec:
        real = [float(closed_loop_returns(p, starts, omegas, steps).mean())
                for p in policies]
        virtual = [float(virtual_returns(p, model, starts, omegas, steps).mean())
                   for p in policies]
        virtual_h = [float(virtual_returns(p, model, starts, omegas,
                                           train_horizon).mean())
                     for p in policies]
        rows.append(GridRow(
            label=objective_label(obj),
            omega_x=None if obj is None else obj.omega_x,
            omega_theta=None if obj is None else obj.omega_theta,
            real_mean=float(np.mean(real)),
            real_stderr=_stderr(real),
            virtual_mean=float(np.mean(virtual)),
            virtual_mean_h65=float(np.mean(virtual_h)),
            real_by_seed=real,
            virtual_by_seed=virtual,
            virtual_h65_by_seed=virtual_h))
    return EvalReport(n_seeds=len(policies), n_starts=n_starts, steps=steps,
                      train_horizon=train_horizon, start_seed=seed, rows=rows)


# ---------------------------------------------------------------------------
# Specialist baselines
# ---------------------------------------------------------------------------

def specialist_population(batch, cfg: TrainConfig, obj: Objective) -> RolloutPopulation:
    """The usual training population with every objective pinned to one value."""
    pop = build_population(batch, cfg)
    omegas = np.tile(obj.as_array(), (len(pop), 1))
    return RolloutPopulation(starts=pop.starts, omegas=omegas)


def train_specialists(model: EnsembleModel, batch, cfg: TrainConfig,
                      objectives: Sequence[Objective] = TABLE_OBJECTIVES):
    """One fixed-objective policy per grid objective, identical budget to the
    conditioned policy.  Returns [(objective, policy, learning_curve)]."""
    out = []
    for obj in objectives:
        pop = specialist_population(batch, cfg, obj)
        policy, curve = train_policy(model, batch, cfg, population=pop)
        out.append((obj, policy, curve))
    return out


@dataclass
class GapRow:
    omega_x: float
    omega_theta: float
    vop_mean: float
    specialist_mean: float
    gap: float                      # vop_mean - specialist_mean


def specialist_gap_report(policies: Sequence[PolicyModel],
                          specialists, n_starts: int = 100, steps: int = 250,
                          seed: int = 0) -> List[GapRow]:
    """Conditioned-policy vs specialist mean return at each objective.

    The conditioned mean is itself averaged over the trained seeds; each
    specialist is a single run, as in the original comparison.
    """
    starts = make_start_states(n_starts, seed)
    rows = []
    for obj, specialist, _ in specialists:
        omegas = np.tile(obj.as_array(), (n_starts, 1))
        vop = float(np.mean([closed_loop_returns(p, starts, omegas, steps).mean()
                             for p in policies]))
        spec = float(closed_loop_returns(specialist, starts, omegas, steps).mean())
        rows.append(GapRow(obj.omega_x, obj.omega_theta, vop, spec, vop - spec))
    return rows


# ---------------------------------------------------------------------------
# Objective switch
# ---------------------------------------------------------------------------

@dataclass
class ScenarioResult:
    omega_theta: float
    switch_step: int
    steps: int
    states: np.ndarray              # (steps + 1, 4)
    actions: np.ndarray             # (steps,)
    rewards: np.ndarray             # (steps,), reward of each successor
    omegas: np.ndarray              # (steps, 2), objective in force per step
    reached_target: bool            # |x - target| < tol at the final step
    held_pole: bool                 # max |theta| after the switch < 0.4
    swung_through: bool             # max |theta| after the switch > pi/2
    first_reach_step: Optional[int]


def objective_switch_scenario(policy: PolicyModel, omega_theta: float,
                              omega_x_before: float = -1.0,
                              omega_x_after: float = 1.0,
                              switch_step: int = 150, steps: int = 250,
                              start: Optional[EnvState] = None,
                              reach_tolerance: float = 0.25) -> ScenarioResult:
    """Swing up toward one target, then retarget mid-episode.

    Stepped scalar by scalar, which keeps the trajectory bit-identical to
    the live steering service replaying the same objective schedule.
    """
    if start is None:
        start = EnvState(-X_LIMIT, -math.pi, 0.0, 0.0)
    s = start
    states = [start.as_array()]
    actions, rewards, omegas = [], [], []
    for t in range(steps):
        obj = Objective(omega_x_before if t < switch_step else omega_x_after,
                        omega_theta)
        a = policy_action(policy, s, obj)
        s = env_step(s, a)
        states.append(s.as_array())
        actions.append(a)
        rewards.append(reward(s, obj))
        omegas.append(obj.as_array())
    states = np.array(states)
    theta_after = np.abs(states[switch_step:, 1])
    x_final = states[-1, 0]
    reach = np.abs(states[switch_step:, 0] - omega_x_after) < reach_tolerance
    hits = np.nonzero(reach)[0]
    return ScenarioResult(
        omega_theta=omega_theta, switch_step=switch_step, steps=steps,
        states=states, actions=np.array(actions), rewards=np.array(rewards),
        omegas=np.array(omegas),
        reached_target=bool(abs(x_final - omega_x_after) < reach_tolerance),
        held_pole=bool(theta_after.max() < SMOOTHING_ANGLE),
        swung_through=bool(theta_after.max() > math.pi / 2),
        first_reach_step=int(switch_step + hits[0]) if hits.size else None)


# ---------------------------------------------------------------------------
# Virtual-to-real transfer
# ---------------------------------------------------------------------------

@dataclass
class TransferResult:
    omega: Objective
    virtual_states: np.ndarray      # (steps + 1, 4)
    real_states: np.ndarray
    virtual_actions: np.ndarray     # (steps,)
    real_actions: np.ndarray
    divergence: np.ndarray          # (steps + 1,), zero at index 0


def _closed_loop_trajectory(policy: PolicyModel, step_fn: Callable,
                            start: np.ndarray, omega: np.ndarray, steps: int):
    s = start[None, :].copy()
    states = [s[0].copy()]
    actions = []
    for _ in range(steps):
        a = policy_action_array(policy, s, omega)
        s = step_fn(s, a)
        states.append(s[0].copy())
        actions.append(float(a[0]))
    return np.array(states), np.array(actions)


def transfer_check(policy: PolicyModel, model, omega: Objective,
                   start: Optional[EnvState] = None,
                   steps: int = 250) -> TransferResult:
    """Paired model/true-environment trajectories from one start.

    `model` is either a trained ensemble or any (states, actions) -> states
    callable, so a ground-truth stand-in collapses the divergence to zero.
    """
    if start is None:
        start = EnvState(0.0, -math.pi, 0.0, 0.0)
    step_fn = model if callable(model) else \
        (lambda s, a: predict_mean_array(model, s, a))
    omega_arr = omega.as_array()[None, :]
    s0 = start.as_array()
    v_states, v_actions = _closed_loop_trajectory(policy, step_fn, s0,
                                                  omega_arr, steps)
    r_states, r_actions = _closed_loop_trajectory(policy, env_step_array, s0,
                                                  omega_arr, steps)
    diff = v_states - r_states
    diff[:, 1] = wrap_pi(v_states[:, 1] - r_states[:, 1])
    divergence = np.linalg.norm(diff, axis=1)
    return TransferResult(omega=omega, virtual_states=v_states,
                          real_states=r_states, virtual_actions=v_actions,
                          real_actions=r_actions, divergence=divergence)


def ends_balanced(states: np.ndarray, omega: Objective, window: int = 50,
                  theta_tol: float = SMOOTHING_ANGLE,
                  x_tol: float = 0.3) -> bool:
    """Pole up and cart on target over the last `window` states."""
    tail = states[-window:]
    return bool((np.abs(tail[:, 1]) < theta_tol).all()
                and (np.abs(tail[:, 0] - omega.omega_x) < x_tol).all())


# ---------------------------------------------------------------------------
# Conditioning check
# ---------------------------------------------------------------------------

def mid_swing_states(states: np.ndarray, n: int = 100, seed: int = 0) -> np.ndarray:
    """Sample states whose pole is well away from both rest points."""
    theta = np.abs(wrap_pi(states[:, 1]))
    pool = states[(theta > SMOOTHING_ANGLE) & (theta < math.pi - SMOOTHING_ANGLE)]
    if pool.shape[0] < n:
        raise ValueError(f"only {pool.shape[0]} mid-swing states available, need {n}")
    rng = np.random.default_rng(derive_seed(seed, _MID_SWING_TAG))
    idx = rng.choice(pool.shape[0], size=n, replace=False)
    return pool[idx]


def conditioning_gap(policy: PolicyModel, states: np.ndarray,
                     omega_theta_low: float = 0.0,
                     omega_theta_high: float = 4.0,
                     omega_x: float = 0.0) -> float:
    """Mean absolute action difference between two pole-weight settings on
    the same states; near zero means the policy ignores its objective input."""
    low = np.tile([omega_x, omega_theta_low], (states.shape[0], 1))
    high = np.tile([omega_x, omega_theta_high], (states.shape[0], 1))
    a_low = policy_action_array(policy, states, low)
    a_high = policy_action_array(policy, states, high)
    return float(np.mean(np.abs(a_low - a_high)))


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def report_to_dict(report: EvalReport) -> dict:
    return {
        "n_seeds": report.n_seeds,
        "n_starts": report.n_starts,
        "steps": report.steps,
        "train_horizon": report.train_horizon,
        "start_seed": report.start_seed,
        "rows": [{
            "label": r.label,
            "omega_x": r.omega_x,
            "omega_theta": r.omega_theta,
            "real_mean": r.real_mean,
            "real_stderr": r.real_stderr,
            "virtual_mean": r.virtual_mean,
            "virtual_mean_h65": r.virtual_mean_h65,
            "real_by_seed": r.real_by_seed,
            "virtual_by_seed": r.virtual_by_seed,
            "virtual_h65_by_seed": r.virtual_h65_by_seed,
        } for r in report.rows],
    }


def save_report(report: EvalReport, json_path, csv_path=None):
    with open(json_path, "w") as f:
        f.write(json.dumps(report_to_dict(report), indent=2, sort_keys=True))
        f.write("\n")
    if csv_path is not None:
        with open(csv_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["label", "omega_x", "omega_theta", "real_mean",
                             "real_stderr", "virtual_mean", "virtual_mean_h65"])
            for r in report.rows:
                writer.writerow([
                    r.label,
                    "" if r.omega_x is None else repr(r.omega_x),
                    "" if r.omega_theta is None else repr(r.omega_theta),
                    repr(r.real_mean), repr(r.real_stderr),
                    repr(r.virtual_mean), repr(r.virtual_mean_h65)])


def save_trajectory_csv(path, states: np.ndarray, actions: np.ndarray,
                        rewards: np.ndarray, omegas: np.ndarray):
    """One row per step: the state acted from, the action and objective
    applied there, and the successor's reward; a final action-less row
    carries the terminal state."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["t", "x", "theta", "x_dot", "theta_dot", "a", "r",
                         "omega_x", "omega_theta"])
        n = actions.shape[0]
        for t in range(n):
            writer.writerow([t] + [repr(float(v)) for v in states[t]] +
                            [repr(float(actions[t])), repr(float(rewards[t])),
                             repr(float(omegas[t, 0])), repr(float(omegas[t, 1]))])
        writer.writerow([n] + [repr(float(v)) for v in states[n]] + ["", "", "", ""])
