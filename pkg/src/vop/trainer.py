"""Variable objective policy training by backprop through virtual rollouts.

The policy is a [6, 10, 10, 1] rectifier network over (normalized state,
normalized objective) with a tanh output scaled to the action range [-2, 2].
Training unrolls it through the frozen dynamics ensemble:

    a_t = policy(s_t, omega)        s_{t+1} = ensemble_mean(s_t, a_t)
    R = sum_t gamma^t r(s_{t+1}, omega)       L = -mean_batch R

A fixed population of (start state, objective) pairs is drawn once at the
beginning of training: start states uniformly from the offline batch's
states, objectives uniformly from their sampling boxes.  The objective stays
constant along each rollout.  Each epoch sweeps the population in shuffled
minibatches, one Adam step per minibatch, and records the population's mean
virtual return; training stops at the epoch budget or once improvement
plateaus.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass
from typing import List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .cartpole import (ACTION_LIMIT, OMEGA_THETA_BOX, OMEGA_X_BOX, EnvState,
                       Objective, reward_batch, sample_initial_state,
                       sample_objective)
from .dataset import NormStats, TransitionBatch, load_norm_stats, save_norm_stats
from .ensemble import EnsembleModel, predict_mean_taped
from .nn import GradientBuffer, Mlp, adam_init, adam_step, gradient_buffer, \
    load_mlp, mlp_forward, mlp_init, save_mlp
from .seeds import derive_seed

POLICY_DIMS = (6, 10, 10, 1)

_INIT_TAG = 201
_POPULATION_TAG = 202
_SHUFFLE_TAG = 203
_CURVE_TAG = 204


class RolloutError(RuntimeError):
    pass


class PolicyTrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    horizon: int = 65
    gamma: float = 1.0
    population: int = 2000
    minibatch: int = 100
    epochs: int = 200
    learning_rate: float = 1e-3
    grad_clip: Optional[float] = None  # global-norm bound per minibatch
                                       # gradient; None leaves Adam raw
    adjoint_clip: Optional[float] = None  # per-rollout bound on the state
                                          # adjoint at each BPTT step, in
                                          # d(return)/d(state) units
    adjoint_clip_mode: str = "element"    # "element": clamp each component;
                                          # "row": rescale the whole row
    seed: int = 0
    plateau_window: int = 5       # epochs over which plateau improvement is measured
    plateau_tol: float = 0.01     # stop once relative gain over the window drops
                                  # below this; 0 disables the early stop
    plateau_min_epochs: int = 40  # no plateau stop before this epoch; the
                                  # curve shelves mid-run while the balance
                                  # skill forms, long before convergence
    curve_steps: int = 250        # virtual-episode length for the learning curve,
                                  # so curve values compare to real episode returns
    curve_sample: int = 500       # population subsample evaluated for the curve

    def __post_init__(self):
        if not 1 <= self.horizon <= 200:
            raise ValueError(f"horizon must lie in [1, 200], got {self.horizon}")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.population < 1 or self.minibatch < 1 or self.epochs < 1:
            raise ValueError("population, minibatch and epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValueError(f"grad_clip must be positive or None, got {self.grad_clip}")
        if self.adjoint_clip is not None and not self.adjoint_clip > 0:
            raise ValueError(f"adjoint_clip must be positive or None, got {self.adjoint_clip}")
        if self.adjoint_clip_mode not in ("element", "row"):
            raise ValueError(f"adjoint_clip_mode must be 'element' or 'row', "
                             f"got {self.adjoint_clip_mode!r}")
        if self.plateau_window < 1 or self.plateau_tol < 0:
            raise ValueError("plateau window must be >= 1 and tolerance >= 0")
        if self.plateau_min_epochs < 0:
            raise ValueError("plateau_min_epochs must be >= 0")
        if self.curve_steps < 1 or self.curve_sample < 1:
            raise ValueError("curve steps and sample size must be >= 1")


@dataclass
class PolicyModel:
    net: Mlp
    norm: NormStats
    action_scale: float = ACTION_LIMIT
    omega_center: np.ndarray = None
    omega_half_range: np.ndarray = None

    def __post_init__(self):
        if self.omega_center is None:
            self.omega_center = np.array([(OMEGA_X_BOX[0] + OMEGA_X_BOX[1]) / 2.0,
                                          (OMEGA_THETA_BOX[0] + OMEGA_THETA_BOX[1]) / 2.0])
        if self.omega_half_range is None:
            self.omega_half_range = np.array([(OMEGA_X_BOX[1] - OMEGA_X_BOX[0]) / 2.0,
                                              (OMEGA_THETA_BOX[1] - OMEGA_THETA_BOX[0]) / 2.0])

    def normalize_omega(self, omega: np.ndarray) -> np.ndarray:
        return (omega - self.omega_center) / self.omega_half_range


@dataclass
class RolloutPopulation:
    starts: np.ndarray   # (N, 4) states drawn from the offline batch
    omegas: np.ndarray   # (N, 2) objectives, fixed for the whole run

    def __len__(self):
        return self.starts.shape[0]


def policy_init(norm: NormStats, seed: int = 0) -> PolicyModel:
    net = mlp_init(POLICY_DIMS, "tanh", seed=seed)
    return PolicyModel(net=net, norm=norm)


def policy_forward(policy: PolicyModel, s: Var, omega_norm: np.ndarray,
                   tape: Optional[Tape] = None,
                   grad_buffer: Optional[GradientBuffer] = None) -> Var:
    """Batched action Var in [-2, 2] for a (B, 4) state Var and constant
    normalized objectives."""
    s_norm = ad.scale(tape, ad.add_const(tape, s, -policy.norm.mu_s),
                      1.0 / policy.norm.sigma_s)
    x = ad.concat(tape, [s_norm, omega_norm])
    out = mlp_forward(policy.net, x, tape, grad_buffer)
    return ad.scale(tape, out, policy.action_scale)


def policy_action_array(policy: PolicyModel, s: np.ndarray, omega: np.ndarray) -> np.ndarray:
    """Vectorized eager actions for (N, 4) states and (N, 2) objectives."""
    x = np.hstack([policy.norm.normalize_state(s), policy.normalize_omega(omega)])
    return policy.action_scale * mlp_forward(policy.net, x)[:, 0]


def policy_action(policy: PolicyModel, s: EnvState, obj: Objective) -> float:
    """Single eager action; the closed-loop interface used on the real system."""
    a = policy_action_array(policy, s.as_array()[None, :],
                            obj.as_array()[None, :])
    return float(a[0])


def as_policy_fn(policy: PolicyModel):
    return lambda s, obj: policy_action(policy, s, obj)


# ---------------------------------------------------------------------------
# Virtual rollouts
# ---------------------------------------------------------------------------

def _unroll(policy: PolicyModel, model: EnsembleModel, starts: np.ndarray,
            omegas: np.ndarray, horizon: int, gamma: float,
            tape: Optional[Tape] = None,
            grad_buffer: Optional[GradientBuffer] = None,
            record_states: bool = False,
            adjoint_clip: Optional[float] = None,
            adjoint_clip_mode: str = "element"):
    if not model.frozen:
        raise ValueError("rollouts require a frozen ensemble")
    omega_norm = policy.normalize_omega(omegas)
    s = Var(starts)
    ret = None
    states = [starts.copy()] if record_states else None
    actions = [] if record_states else None
    rewards = [] if record_states else None
    for t in range(horizon):
        a = policy_forward(policy, s, omega_norm, tape, grad_buffer)
        s = predict_mean_taped(tape, model, s, a)
        if adjoint_clip is not None:
            # bound is per rollout in d(return)/d(state) units; the training
            # loss is a mean over rows, so compensate its 1/B scaling
            clip_op = ad.clamp_grad if adjoint_clip_mode == "element" else ad.clip_rows
            s = clip_op(tape, s, adjoint_clip / starts.shape[0])
        if not np.isfinite(s.data).all():
            raise RolloutError(f"non-finite virtual state at rollout step {t}")
        r = reward_batch(tape, s, omegas)
        term = r if gamma == 1.0 else ad.scale(tape, r, gamma ** t)
        ret = term if ret is None else ad.add(tape, ret, term)
        if record_states:
            states.append(s.data.copy())
            actions.append(a.data[:, 0].copy())
            rewards.append(r.data[:, 0].copy())
    if record_states:
        return ret, np.stack(states, axis=1), np.stack(actions, axis=1), np.stack(rewards, axis=1)
    return ret


def rollout_batch(policy: PolicyModel, model: EnsembleModel, starts: np.ndarray,
                  omegas: np.ndarray, cfg: TrainConfig, tape: Optional[Tape] = None,
                  grad_buffer: Optional[GradientBuffer] = None,
                  record_states: bool = False):
    """Unroll the policy through the ensemble for the whole batch at once.

    Returns a (B, 1) Var of discounted returns; with a tape the entire
    H-step composition is differentiable w.r.t. the policy weights.  With
    `record_states` the visited states, actions and rewards come back too.
    """
    return _unroll(policy, model, starts, omegas, cfg.horizon, cfg.gamma,
                   tape, grad_buffer, record_states,
                   adjoint_clip=cfg.adjoint_clip,
                   adjoint_clip_mode=cfg.adjoint_clip_mode)


def rollout(policy: PolicyModel, model: EnsembleModel, s0: EnvState,
            omega: Objective, cfg: TrainConfig, tape: Optional[Tape] = None):
    """Single virtual trajectory; returns (states, actions, rewards, return)."""
    ret, states, actions, rewards = rollout_batch(
        policy, model, s0.as_array()[None, :], omega.as_array()[None, :],
        cfg, tape, record_states=True)
    ret_value = ret if tape is not None else float(ret.data[0, 0])
    return states[0], actions[0], rewards[0], ret_value


def virtual_returns(policy: PolicyModel, model: EnsembleModel, starts: np.ndarray,
                    omegas: np.ndarray, horizon: int, gamma: float = 1.0,
                    chunk: int = 500) -> np.ndarray:
    """Eager per-rollout discounted returns, chunked to bound memory.

    Unlike training rollouts, the horizon here may exceed the TrainConfig
    bound; evaluation also unrolls the model for full 250-step episodes.
    """
    out = np.empty(starts.shape[0])
    for lo in range(0, starts.shape[0], chunk):
        ret = _unroll(policy, model, starts[lo:lo + chunk],
                      omegas[lo:lo + chunk], horizon, gamma)
        out[lo:lo + chunk] = ret.data[:, 0]
    return out


def virtual_episode(policy: PolicyModel, model: EnsembleModel, s0: EnvState,
                    omega: Objective, steps: int):
    """Eager virtual trajectory of arbitrary length; returns
    (states, actions, rewards) arrays of lengths steps+1 / steps / steps."""
    _, states, actions, rewards = _unroll(
        policy, model, s0.as_array()[None, :], omega.as_array()[None, :],
        steps, 1.0, record_states=True)
    return states[0], actions[0], rewards[0]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def build_population(batch: TransitionBatch, cfg: TrainConfig) -> RolloutPopulation:
    """Draw the fixed (start, objective) population for one training run."""
    rng = np.random.default_rng(derive_seed(cfg.seed, _POPULATION_TAG))
    all_states = batch.arrays()[0]
    idx = rng.integers(0, all_states.shape[0], size=cfg.population)
    starts = all_states[idx].copy()
    omegas = np.array([sample_objective(rng).as_array() for _ in range(cfg.population)])
    return RolloutPopulation(starts=starts, omegas=omegas)


@dataclass
class LearningCurvePoint:
    epoch: int
    mean_virtual_return: float
    std_virtual_return: float


def curve_return_stats(policy: PolicyModel, model: EnsembleModel,
                       starts: np.ndarray, omegas: np.ndarray,
                       steps: int, gamma: float = 1.0):
    r = virtual_returns(policy, model, starts, omegas, steps, gamma)
    return float(r.mean()), float(r.std())


def _curve_states(cfg: TrainConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Fixed (start, objective) sample backing the learning curve.

    Starts come from the environment's initial-state distribution, not from
    the training population, so curve values estimate the deployment metric
    (return over full episodes from rest) rather than progress on the
    mid-swing batch states the policy trains on.
    """
    rng = np.random.default_rng(derive_seed(cfg.seed, _CURVE_TAG))
    starts = np.stack([sample_initial_state(rng).as_array()
                       for _ in range(cfg.curve_sample)])
    omegas = np.array([sample_objective(rng).as_array()
                       for _ in range(cfg.curve_sample)])
    return starts, omegas


def _clip_gradient(buf: GradientBuffer, bound: float) -> None:
    """Scale the accumulated gradient so its global L2 norm is <= bound.

    BPTT through rollout segments that hover near the unstable upright
    equilibrium produces occasional gradient spikes orders of magnitude
    above typical minibatches; unclipped they derail Adam's step-size
    adaptation.
    """
    total = 0.0
    for arr in buf.d_weights + buf.d_biases:
        total += float(np.sum(arr * arr))
    norm = float(np.sqrt(total))
    if norm > bound:
        scale = bound / norm
        for arr in buf.d_weights + buf.d_biases:
            arr *= scale


def train_policy(model: EnsembleModel, batch: TransitionBatch, cfg: TrainConfig,
                 population: Optional[RolloutPopulation] = None):
    """Train a policy against the frozen ensemble.

    Returns (policy, learning_curve).  Curve entries are mean/std virtual
    returns over full `curve_steps`-length episodes from a fixed sample of
    environment-style starts, so they compare directly to real evaluation
    returns even though training itself unrolls only `horizon` steps from
    batch states; epoch 0 is the pre-training value.  The plateau stop
    watches this curve.
    """
    if not model.frozen:
        raise ValueError("train_policy requires a frozen ensemble")
    if population is None:
        population = build_population(batch, cfg)
    policy = policy_init(model.norm, seed=derive_seed(cfg.seed, _INIT_TAG))
    buf = gradient_buffer(policy.net)
    opt = adam_init(policy.net, learning_rate=cfg.learning_rate)
    shuffle_rng = np.random.default_rng(derive_seed(cfg.seed, _SHUFFLE_TAG))
    n = len(population)
    curve_starts, curve_omegas = _curve_states(cfg)

    curve: List[LearningCurvePoint] = []
    mean0, std0 = curve_return_stats(policy, model, curve_starts, curve_omegas,
                                     cfg.curve_steps, cfg.gamma)
    curve.append(LearningCurvePoint(0, mean0, std0))
    best_so_far = [mean0]   # per epoch, for the plateau window

    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        for lo in range(0, n, cfg.minibatch):
            idx = order[lo:lo + cfg.minibatch]
            tape = Tape()
            try:
                ret = rollout_batch(policy, model, population.starts[idx],
                                    population.omegas[idx], cfg, tape, buf)
            except RolloutError as e:
                raise PolicyTrainingError(
                    f"epoch {epoch}, minibatch at offset {lo}: {e}") from e
            loss = ad.neg(tape, ad.mean_all(tape, ret))
            if not np.isfinite(loss.data):
                raise PolicyTrainingError(
                    f"epoch {epoch}, minibatch at offset {lo}: loss is not finite")
            buf.zero()
            tape.backward(loss)
            if cfg.grad_clip is not None:
                _clip_gradient(buf, cfg.grad_clip)
            adam_step(policy.net, buf, opt)
        mean_r, std_r = curve_return_stats(policy, model, curve_starts,
                                           curve_omegas, cfg.curve_steps,
                                           cfg.gamma)
        curve.append(LearningCurvePoint(epoch, mean_r, std_r))
        best_so_far.append(max(best_so_far[-1], mean_r))
        # plateau: best return gained < tol (relative) over the last window
        if (epoch >= max(cfg.plateau_window, cfg.plateau_min_epochs)
                and cfg.plateau_tol > 0.0):
            ref = best_so_far[epoch - cfg.plateau_window]
            if best_so_far[epoch] - ref < cfg.plateau_tol * abs(ref):
                break
    return policy, curve


def policy_gradient_check(policy: PolicyModel, model: EnsembleModel,
                          starts: np.ndarray, omegas: np.ndarray,
                          cfg: TrainConfig, h: float = 1e-5) -> float:
    """Max relative error between the BPTT gradient of the rollout loss and
    central finite differences over every policy parameter."""
    def loss_value() -> float:
        ret = rollout_batch(policy, model, starts, omegas, cfg)
        return float(-ret.data.mean())

    tape = Tape()
    buf = gradient_buffer(policy.net)
    ret = rollout_batch(policy, model, starts, omegas, cfg, tape, buf)
    loss = ad.neg(tape, ad.mean_all(tape, ret))
    tape.backward(loss)

    worst = 0.0
    params = policy.net.weights + policy.net.biases
    grads = buf.d_weights + buf.d_biases
    for p, g in zip(params, grads):
        flat_p = p.reshape(-1)
        flat_g = g.reshape(-1)
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + h
            up = loss_value()
            flat_p[i] = orig - h
            down = loss_value()
            flat_p[i] = orig
            fd = (up - down) / (2.0 * h)
            denom = max(abs(fd), abs(flat_g[i]), 1e-6)
            worst = max(worst, abs(fd - flat_g[i]) / denom)
    return worst


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

def save_policy(policy: PolicyModel, directory, cfg: Optional[TrainConfig] = None,
                curve: Optional[List[LearningCurvePoint]] = None):
    os.makedirs(directory, exist_ok=True)
    save_mlp(policy.net, os.path.join(directory, "policy.json"))
    save_norm_stats(policy.norm, os.path.join(directory, "norm_stats.json"))
    manifest = {
        "action_scale": policy.action_scale,
        "omega_box": {"omega_x": list(OMEGA_X_BOX), "omega_theta": list(OMEGA_THETA_BOX)},
        "norm_stats": "norm_stats.json",
        "train_config": asdict(cfg) if cfg is not None else None,
    }
    with open(os.path.join(directory, "manifest.json"), "w") as f:
        f.write(json.dumps(manifest, indent=2, sort_keys=True))
    if curve is not None:
        save_learning_curve(curve, os.path.join(directory, "learning_curve.csv"))


def load_policy(directory) -> Tuple[PolicyModel, dict]:
    with open(os.path.join(directory, "manifest.json")) as f:
        manifest = json.load(f)
    net = load_mlp(os.path.join(directory, "policy.json"))
    norm = load_norm_stats(os.path.join(directory, manifest["norm_stats"]))
    policy = PolicyModel(net=net, norm=norm,
                         action_scale=manifest.get("action_scale", ACTION_LIMIT))
    return policy, manifest


def save_learning_curve(curve: List[LearningCurvePoint], path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "mean_virtual_return", "std_virtual_return"])
        for pt in curve:
            writer.writerow([pt.epoch, repr(pt.mean_virtual_return),
                             repr(pt.std_virtual_return)])


def load_learning_curve(path) -> List[LearningCurvePoint]:
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out.append(LearningCurvePoint(int(row["epoch"]),
                                          float(row["mean_virtual_return"]),
                                          float(row["std_virtual_return"])))
    return out
