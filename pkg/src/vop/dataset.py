"""Offline transition batches from the random generating policy.

A batch is the only source of environment knowledge downstream: episodes
start from uniformly sampled states and apply i.i.d. uniform random actions
in [-2, 2].  Alongside the raw (s, a, s') tuples we keep the normalization
statistics used by the dynamics models: per-dimension mean/std of states and
of one-step deltas, where the angle component of a delta is the wrapped
shortest angular difference (so the regression target stays continuous
across +-pi).

File format (JSON Lines):
    {"version": 1, "seed": ..., "episodes": ..., "steps": ...}
    {"ep": 0, "t": 0, "s": [x, theta, x_dot, theta_dot], "a": ..., "sn": [...]}
    ...
Doubles are serialized at full precision, so save -> load round-trips are
bit-exact and generation is byte-reproducible per seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .cartpole import (ACTION_LIMIT, DEFAULT_PHYSICS, X_LIMIT, EnvState,
                       PhysicsParams, env_step, sample_initial_state,
                       state_from_array, wrap_pi)

SIGMA_FLOOR = 1e-6


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Transition:
    s: EnvState
    a: float
    s_next: EnvState
    episode_id: int
    step_index: int


@dataclass
class TransitionBatch:
    transitions: List[Transition]
    seed: int
    episodes: int
    steps: int
    _arrays: Optional[tuple] = field(default=None, repr=False, compare=False)

    def __len__(self):
        return len(self.transitions)

    def arrays(self):
        """(states, actions, next_states) as (N,4), (N,), (N,4) arrays, cached."""
        if self._arrays is None:
            s = np.array([[t.s.x, t.s.theta, t.s.x_dot, t.s.theta_dot]
                          for t in self.transitions])
            a = np.array([t.a for t in self.transitions])
            sn = np.array([[t.s_next.x, t.s_next.theta, t.s_next.x_dot, t.s_next.theta_dot]
                           for t in self.transitions])
            self._arrays = (s, a, sn)
        return self._arrays

    def episode_ids(self) -> np.ndarray:
        return np.array([t.episode_id for t in self.transitions])


@dataclass
class NormStats:
    mu_s: np.ndarray
    sigma_s: np.ndarray
    mu_ds: np.ndarray
    sigma_ds: np.ndarray

    def normalize_state(self, s: np.ndarray) -> np.ndarray:
        return (s - self.mu_s) / self.sigma_s


def generate_batch(episodes: int, steps: int, seed: int,
                   params: PhysicsParams = DEFAULT_PHYSICS) -> TransitionBatch:
    """Roll out `episodes` random-action episodes of `steps` steps each.

    Each episode draws from its own rng stream seeded by (seed, episode_id),
    so the result is deterministic regardless of execution order.
    """
    if episodes < 1 or steps < 1:
        raise ValueError(f"episodes and steps must be >= 1, got {episodes}, {steps}")
    transitions: List[Transition] = []
    for ep in range(episodes):
        rng = np.random.default_rng([seed, ep])
        s = sample_initial_state(rng)
        for t in range(steps):
            a = float(rng.uniform(-ACTION_LIMIT, ACTION_LIMIT))
            s_next = env_step(s, a, params)
            transitions.append(Transition(s, a, s_next, ep, t))
            s = s_next
    return TransitionBatch(transitions=transitions, seed=seed,
                           episodes=episodes, steps=steps)


def compute_norm_stats(batch: TransitionBatch) -> NormStats:
    """Population mean/std of states and wrapped one-step deltas, std floored."""
    if len(batch) == 0:
        raise ValueError("cannot compute normalization statistics of an empty batch")
    s, _, sn = batch.arrays()
    ds = sn - s
    ds[:, 1] = wrap_pi(ds[:, 1])
    mu_s = s.mean(axis=0)
    sigma_s = np.maximum(s.std(axis=0), SIGMA_FLOOR)
    mu_ds = ds.mean(axis=0)
    sigma_ds = np.maximum(ds.std(axis=0), SIGMA_FLOOR)
    return NormStats(mu_s, sigma_s, mu_ds, sigma_ds)


def wrapped_deltas(batch: TransitionBatch) -> np.ndarray:
    """(N, 4) one-step deltas with the angle component wrapped into [-pi, pi)."""
    s, _, sn = batch.arrays()
    ds = sn - s
    ds[:, 1] = wrap_pi(ds[:, 1])
    return ds


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_batch(batch: TransitionBatch, path):
    with open(path, "w") as f:
        header = {"version": 1, "seed": batch.seed,
                  "episodes": batch.episodes, "steps": batch.steps}
        f.write(json.dumps(header) + "\n")
        for t in batch.transitions:
            rec = {"ep": t.episode_id, "t": t.step_index,
                   "s": [t.s.x, t.s.theta, t.s.x_dot, t.s.theta_dot],
                   "a": t.a,
                   "sn": [t.s_next.x, t.s_next.theta, t.s_next.x_dot, t.s_next.theta_dot]}
            f.write(json.dumps(rec) + "\n")


def _validate_state(vec, line_no: int, name: str) -> EnvState:
    if len(vec) != 4:
        raise DatasetFormatError(f"line {line_no}: {name} must have 4 components")
    if not all(math.isfinite(v) for v in vec):
        raise DatasetFormatError(f"line {line_no}: non-finite {name}")
    x, theta = vec[0], vec[1]
    if not -X_LIMIT <= x <= X_LIMIT:
        raise DatasetFormatError(f"line {line_no}: {name}.x={x} outside [-2.5, 2.5]")
    if not -math.pi <= theta < math.pi:
        raise DatasetFormatError(f"line {line_no}: {name}.theta={theta} outside [-pi, pi)")
    return state_from_array(vec)


def load_batch(path) -> TransitionBatch:
    """Parse and validate a dataset file; raises DatasetFormatError with the
    offending line number and returns no partial batch."""
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines:
        raise DatasetFormatError("line 1: empty dataset file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"line 1: malformed header: {e}") from None
    if not isinstance(header, dict) or header.get("version") != 1:
        raise DatasetFormatError("line 1: missing or unsupported dataset version")
    episodes, steps, seed = header["episodes"], header["steps"], header["seed"]
    expected = episodes * steps
    if len(lines) - 1 != expected:
        raise DatasetFormatError(
            f"line {len(lines)}: expected {expected} records, found {len(lines) - 1} "
            "(truncated or padded file)")
    transitions: List[Transition] = []
    for i, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise DatasetFormatError(f"line {i}: malformed record: {e}") from None
        try:
            ep, t, a = rec["ep"], rec["t"], rec["a"]
            s = _validate_state(rec["s"], i, "s")
            sn = _validate_state(rec["sn"], i, "sn")
        except KeyError as e:
            raise DatasetFormatError(f"line {i}: missing field {e}") from None
        if not (math.isfinite(a) and -ACTION_LIMIT <= a <= ACTION_LIMIT):
            raise DatasetFormatError(f"line {i}: action {a} outside [-2, 2]")
        expected_ep, expected_t = divmod(i - 2, steps)
        if ep != expected_ep or t != expected_t:
            raise DatasetFormatError(
                f"line {i}: out-of-order record (ep={ep}, t={t}), "
                f"expected (ep={expected_ep}, t={expected_t})")
        transitions.append(Transition(s, a, sn, ep, t))
    return TransitionBatch(transitions=transitions, seed=seed,
                           episodes=episodes, steps=steps)


def save_norm_stats(stats: NormStats, path):
    doc = {"mu_s": stats.mu_s.tolist(), "sigma_s": stats.sigma_s.tolist(),
           "mu_ds": stats.mu_ds.tolist(), "sigma_ds": stats.sigma_ds.tolist()}
    with open(path, "w") as f:
        f.write(json.dumps(doc))


def load_norm_stats(path) -> NormStats:
    with open(path) as f:
        doc = json.load(f)
    stats = NormStats(*(np.asarray(doc[k], dtype=np.float64)
                        for k in ("mu_s", "sigma_s", "mu_ds", "sigma_ds")))
    for name in ("sigma_s", "sigma_ds"):
        if (getattr(stats, name) < SIGMA_FLOOR).any():
            raise DatasetFormatError(f"{name} below the {SIGMA_FLOOR} floor")
    return stats
