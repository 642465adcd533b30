"""Ensemble of one-step dynamics models trained on normalized deltas.

Each of the K members is an independent [5, 20, 20, 4] rectifier network
mapping (normalized state, raw action) to the normalized wrapped state
delta.  Members differ only in their init seeds and minibatch shuffle
streams.  The ensemble transition function is the plain mean of the member
predictions, denormalized and added onto the current state, with the angle
re-wrapped into [-pi, pi):

    s' = s + mu_ds + sigma_ds * mean_k member_k((s - mu_s) / sigma_s, a)

During policy training the members are frozen: `predict_mean` never
registers parameter gradient buffers, so taped gradients flow to the state
and action inputs but never into the member weights.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var, _accum
from .cartpole import state_from_array, wrap_pi
from .dataset import NormStats, TransitionBatch, compute_norm_stats, \
    load_norm_stats, save_norm_stats, wrapped_deltas
from .nn import Mlp, adam_init, adam_step, gradient_buffer, load_mlp, \
    mlp_copy, mlp_forward, mlp_init, save_mlp
from .seeds import derive_seed

MODEL_DIMS = (5, 20, 20, 4)

# stream tags for sub-seed derivation
_SPLIT_TAG = 101
_INIT_TAG = 102
_SHUFFLE_TAG = 103


class EnsembleTrainingError(RuntimeError):
    pass


@dataclass
class EnsembleModel:
    members: List[Mlp]
    norm: NormStats
    frozen: bool = False
    holdout_episodes: Tuple[int, ...] = ()
    # member weights stacked (K, out, in) per layer; cached once frozen
    _stack: Optional["_MemberStack"] = field(default=None, init=False,
                                             repr=False, compare=False)

    @property
    def k(self) -> int:
        return len(self.members)


def phi_hash(model: EnsembleModel) -> str:
    """SHA-256 over all member parameter bytes; detects any weight mutation."""
    h = hashlib.sha256()
    for m in model.members:
        for w in m.weights:
            h.update(np.ascontiguousarray(w).tobytes())
        for b in m.biases:
            h.update(np.ascontiguousarray(b).tobytes())
    return h.hexdigest()


def _regression_arrays(batch: TransitionBatch, norm: NormStats):
    s, a, _ = batch.arrays()
    x = np.hstack([norm.normalize_state(s), a[:, None]])
    y = (wrapped_deltas(batch) - norm.mu_ds) / norm.sigma_ds
    return x, y


def _split_episodes(batch: TransitionBatch, seed: int, holdout_fraction: float):
    rng = np.random.default_rng(derive_seed(seed, _SPLIT_TAG))
    order = rng.permutation(batch.episodes)
    n_hold = max(1, int(round(batch.episodes * holdout_fraction)))
    holdout = np.sort(order[:n_hold])
    train = np.sort(order[n_hold:])
    return train, holdout


def _train_member(member_idx: int, x_train, y_train, x_hold, y_hold, seed: int,
                  epochs: int, learning_rate: float, minibatch: int, patience: int):
    net = mlp_init(MODEL_DIMS, "identity", seed=derive_seed(seed, _INIT_TAG, member_idx))
    buf = gradient_buffer(net)
    opt = adam_init(net, learning_rate=learning_rate)
    shuffle_rng = np.random.default_rng(derive_seed(seed, _SHUFFLE_TAG, member_idx))
    n = x_train.shape[0]
    best_mse = np.inf
    best_net = mlp_copy(net)
    epochs_since_best = 0
    for epoch in range(epochs):
        order = shuffle_rng.permutation(n)
        for lo in range(0, n, minibatch):
            idx = order[lo:lo + minibatch]
            tape = Tape()
            pred = mlp_forward(net, Var(x_train[idx]), tape, buf)
            err = ad.add_const(tape, pred, -y_train[idx])
            loss = ad.mean_all(tape, ad.square(tape, err))
            if not np.isfinite(loss.data):
                raise EnsembleTrainingError(
                    f"member {member_idx}: loss diverged at epoch {epoch}, "
                    f"minibatch offset {lo}")
            buf.zero()
            tape.backward(loss)
            adam_step(net, buf, opt)
        mse = float(((mlp_forward(net, x_hold) - y_hold) ** 2).mean())
        if mse < best_mse:
            best_mse = mse
            best_net = mlp_copy(net)
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= patience:
                break
    return best_net, best_mse


def train_ensemble(batch: TransitionBatch, k: int = 8, epochs: int = 100,
                   seed: int = 0, learning_rate: float = 1e-3,
                   minibatch: int = 256, patience: int = 10,
                   holdout_fraction: float = 0.1, min_transitions: int = 1000):
    """Train K members on the batch; returns (model, per-member holdout MSE).

    Members share one 90/10 by-episode train/holdout split but use distinct
    init seeds and shuffle streams.  Each stops early once its holdout MSE
    has not improved for `patience` epochs and keeps its best weights.
    """
    if len(batch) < min_transitions:
        raise ValueError(f"batch has {len(batch)} transitions, need >= {min_transitions}")
    if k < 1:
        raise ValueError(f"ensemble size must be >= 1, got {k}")
    norm = compute_norm_stats(batch)
    x, y = _regression_arrays(batch, norm)
    train_eps, hold_eps = _split_episodes(batch, seed, holdout_fraction)
    ep_ids = batch.episode_ids()
    train_mask = np.isin(ep_ids, train_eps)
    hold_mask = np.isin(ep_ids, hold_eps)
    x_train, y_train = x[train_mask], y[train_mask]
    x_hold, y_hold = x[hold_mask], y[hold_mask]
    members, mses = [], []
    for i in range(k):
        net, mse = _train_member(i, x_train, y_train, x_hold, y_hold, seed,
                                 epochs, learning_rate, minibatch, patience)
        members.append(net)
        mses.append(mse)
    model = EnsembleModel(members=members, norm=norm, frozen=True,
                          holdout_episodes=tuple(int(e) for e in hold_eps))
    return model, mses


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------

@dataclass
class _MemberStack:
    """All member parameters stacked along a leading K axis, one entry per
    layer, so the whole ensemble evaluates in a few batched matmuls instead
    of K separate network passes."""
    weights: List[np.ndarray]     # (K, out_dim, in_dim), used in the reverse pass
    weights_t: List[np.ndarray]   # (K, in_dim, out_dim), used in the forward pass
    biases: List[np.ndarray]      # (K, 1, out_dim), broadcast over the batch

    @property
    def k(self) -> int:
        return self.weights[0].shape[0]


def _member_stack(model: EnsembleModel) -> _MemberStack:
    if model._stack is not None:
        return model._stack
    dims = model.members[0].dims
    for m in model.members:
        if m.dims != dims or m.output_activation != "identity":
            raise ValueError("ensemble members must share identity-output dims")
    ws = [np.ascontiguousarray(np.stack([m.weights[l] for m in model.members]))
          for l in range(len(dims) - 1)]
    stack = _MemberStack(
        weights=ws,
        weights_t=[np.ascontiguousarray(w.transpose(0, 2, 1)) for w in ws],
        biases=[np.stack([m.biases[l] for m in model.members])[:, None, :]
                for l in range(len(dims) - 1)])
    if model.frozen:    # unfrozen weights may still change; don't cache those
        model._stack = stack
    return stack


def _stacked_mean_array(stack: _MemberStack, x: np.ndarray) -> np.ndarray:
    h = x @ stack.weights_t[0] + stack.biases[0]       # (K, B, dim)
    for wt, b in zip(stack.weights_t[1:], stack.biases[1:]):
        h = np.maximum(h, 0.0) @ wt + b
    return h.mean(axis=0)


def _stacked_mean(tape: Optional[Tape], stack: _MemberStack, x: Var) -> Var:
    """Mean member output as a single taped node; gradients reach x only."""
    h = x.data @ stack.weights_t[0] + stack.biases[0]
    masks = []
    for wt, b in zip(stack.weights_t[1:], stack.biases[1:]):
        masks.append(h > 0.0)
        h = np.maximum(h, 0.0) @ wt + b
    out = Var(h.mean(axis=0))
    if tape is not None:
        ws = stack.weights
        k = stack.k
        def backward():
            gk = np.broadcast_to(out.grad / k, (k,) + out.grad.shape)
            for w, mask in zip(ws[:0:-1], masks[::-1]):
                gk = (gk @ w) * mask
            _accum(x, (gk @ ws[0]).sum(axis=0))
        tape.record(backward)
    return out


def predict_mean_array(model: EnsembleModel, s: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Vectorized mean-ensemble next states for (N, 4) states and (N,) actions."""
    x = np.hstack([model.norm.normalize_state(s), np.asarray(a, dtype=np.float64)[:, None]])
    ds = model.norm.mu_ds + model.norm.sigma_ds * _stacked_mean_array(_member_stack(model), x)
    sn = s + ds
    sn[:, 1] = wrap_pi(sn[:, 1])
    return sn


def predict_mean_taped(tape: Optional[Tape], model: EnsembleModel,
                       s: Var, a: Var) -> Var:
    """Taped batched transition; gradients reach (s, a) but never the weights."""
    norm = model.norm
    s_norm = ad.scale(tape, ad.add_const(tape, s, -norm.mu_s), 1.0 / norm.sigma_s)
    x = ad.concat(tape, [s_norm, a])
    mean = _stacked_mean(tape, _member_stack(model), x)
    ds = ad.add_const(tape, ad.scale(tape, mean, norm.sigma_ds), norm.mu_ds)
    sn = ad.add(tape, s, ds)
    x_col = ad.slice_cols(tape, sn, 0, 1)
    theta_col = ad.wrap_angle(tape, ad.slice_cols(tape, sn, 1, 2))
    vel_cols = ad.slice_cols(tape, sn, 2, 4)
    return ad.concat(tape, [x_col, theta_col, vel_cols])


def predict_mean(model: EnsembleModel, s, a, tape: Optional[Tape] = None):
    """Mean-ensemble one-step prediction.

    With EnvState/float inputs (tape None) returns an EnvState.  With Var
    inputs returns a batched Var whose graph is recorded on `tape`.
    """
    if isinstance(s, Var):
        return predict_mean_taped(tape, model, s, a)
    sn = predict_mean_array(model, s.as_array()[None, :], np.array([a]))[0]
    return state_from_array(sn)


# ---------------------------------------------------------------------------
# Model quality report
# ---------------------------------------------------------------------------

@dataclass
class ModelReport:
    one_step_rmse: np.ndarray          # per state dimension, holdout transitions
    drift: Dict[int, np.ndarray]       # horizon -> per-dimension open-loop RMSE
    drift_aggregate: Dict[int, float]  # horizon -> mean over dimensions
    violation_fraction: float          # fraction of (dim, consecutive-horizon)
                                       # pairs where drift decreased


def _episode_tensors(batch: TransitionBatch, episodes: Sequence[int]):
    s, a, sn = batch.arrays()
    n_ep, steps = batch.episodes, batch.steps
    states = np.concatenate([s.reshape(n_ep, steps, 4),
                             sn.reshape(n_ep, steps, 4)[:, -1:, :]], axis=1)
    actions = a.reshape(n_ep, steps)
    idx = np.asarray(sorted(episodes), dtype=int)
    return states[idx], actions[idx]


def _state_errors(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    err = pred - truth
    err[..., 1] = wrap_pi(err[..., 1])
    return err


def model_report(model, batch: TransitionBatch,
                 horizons: Sequence[int] = (1, 10, 65, 80)) -> ModelReport:
    """Holdout one-step RMSE plus open-loop drift at the given horizons.

    For each horizon h the model replays the logged actions open-loop from
    every holdout (episode, t) with t + h <= steps and reports the RMSE of
    the final predicted state against the logged one.  By construction the
    h=1 drift equals the one-step holdout RMSE.  `model` is either an
    EnsembleModel or any callable (states, actions) -> next_states, which
    lets a ground-truth oracle stand in.
    """
    if callable(model):
        predict = model
        episodes = sorted(set(batch.episode_ids().tolist()))
    else:
        predict = lambda s, a: predict_mean_array(model, s, a)
        episodes = sorted(model.holdout_episodes) if model.holdout_episodes \
            else sorted(set(batch.episode_ids().tolist()))
    states, actions = _episode_tensors(batch, episodes)
    steps = batch.steps

    drift: Dict[int, np.ndarray] = {}
    drift_aggregate: Dict[int, float] = {}
    for h in horizons:
        if not 1 <= h <= steps:
            raise ValueError(f"horizon {h} outside [1, {steps}]")
        n_starts = steps - h + 1
        cur = states[:, :n_starts, :].reshape(-1, 4)
        for i in range(h):
            act = actions[:, i:i + n_starts].reshape(-1)
            cur = predict(cur, act)
        truth = states[:, h:h + n_starts, :].reshape(-1, 4)
        err = _state_errors(cur, truth)
        per_dim = np.sqrt((err ** 2).mean(axis=0))
        drift[h] = per_dim
        drift_aggregate[h] = float(per_dim.mean())

    one_step_pred = predict(states[:, :steps, :].reshape(-1, 4), actions.reshape(-1))
    one_step_err = _state_errors(one_step_pred, states[:, 1:, :].reshape(-1, 4))
    one_step_rmse = np.sqrt((one_step_err ** 2).mean(axis=0))

    hs = sorted(drift)
    pairs = [(a, b) for a, b in zip(hs[:-1], hs[1:])]
    if pairs:
        violations = sum(int(drift[b][d] < drift[a][d])
                         for a, b in pairs for d in range(4))
        violation_fraction = violations / (4 * len(pairs))
    else:
        violation_fraction = 0.0
    return ModelReport(one_step_rmse=one_step_rmse, drift=drift,
                       drift_aggregate=drift_aggregate,
                       violation_fraction=violation_fraction)


# ---------------------------------------------------------------------------
# Checkpointing: directory of member JSONs + norm stats + manifest
# ---------------------------------------------------------------------------

def save_ensemble(model: EnsembleModel, directory, holdout_mses: Optional[List[float]] = None,
                  seed: Optional[int] = None):
    os.makedirs(directory, exist_ok=True)
    for i, m in enumerate(model.members):
        save_mlp(m, os.path.join(directory, f"member_{i:02d}.json"))
    save_norm_stats(model.norm, os.path.join(directory, "norm_stats.json"))
    manifest = {
        "k": model.k,
        "frozen": model.frozen,
        "holdout_episodes": list(model.holdout_episodes),
        "holdout_mses": holdout_mses,
        "seed": seed,
        "phi_hash": phi_hash(model),
    }
    with open(os.path.join(directory, "manifest.json"), "w") as f:
        f.write(json.dumps(manifest, indent=2, sort_keys=True))


def load_ensemble(directory) -> Tuple[EnsembleModel, dict]:
    with open(os.path.join(directory, "manifest.json")) as f:
        manifest = json.load(f)
    members = [load_mlp(os.path.join(directory, f"member_{i:02d}.json"))
               for i in range(manifest["k"])]
    norm = load_norm_stats(os.path.join(directory, "norm_stats.json"))
    model = EnsembleModel(members=members, norm=norm, frozen=manifest.get("frozen", True),
                          holdout_episodes=tuple(manifest.get("holdout_episodes", ())))
    if manifest.get("phi_hash") and phi_hash(model) != manifest["phi_hash"]:
        raise ValueError(f"ensemble checkpoint {directory} failed its parameter hash check")
    return model, manifest
