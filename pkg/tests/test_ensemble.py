"""Dynamics-ensemble training, mean prediction, and the quality report.

Hand-built members (zero weights, constant biases) make the mean-prediction
arithmetic checkable without any training; the toy regressions use targets
with known solutions.
"""
import math

import numpy as np
import pytest

from vop.autodiff import Tape, Var, sum_all
from vop.cartpole import EnvState, env_step_array
from vop.dataset import (NormStats, Transition, TransitionBatch,
                         compute_norm_stats, generate_batch)
from vop.ensemble import (MODEL_DIMS, EnsembleModel, load_ensemble,
                          model_report, phi_hash, predict_mean,
                          predict_mean_array, predict_mean_taped,
                          save_ensemble, train_ensemble)
from vop.nn import Mlp, mlp_forward, mlp_init


def toy_batch(episodes, steps, seed=0, next_state=None):
    """Batch with s_next = next_state(s, a) over random states and actions."""
    if next_state is None:
        next_state = lambda s, a: s
    rng = np.random.default_rng(seed)
    trs = []
    for ep in range(episodes):
        for t in range(steps):
            s = EnvState(float(rng.uniform(-2, 2)), float(rng.uniform(-3, 3)),
                         float(rng.uniform(-1, 1)), float(rng.uniform(-2, 2)))
            a = float(rng.uniform(-2, 2))
            trs.append(Transition(s, a, next_state(s, a), ep, t))
    return TransitionBatch(transitions=trs, seed=seed, episodes=episodes, steps=steps)


def constant_member(c):
    """A (5 -> 4) net that outputs the constant vector c."""
    return Mlp(dims=(5, 4), weights=[np.zeros((4, 5))],
               biases=[np.asarray(c, dtype=np.float64)],
               output_activation="identity")


def unit_norm(mu_ds=None):
    zeros, ones = np.zeros(4), np.ones(4)
    mu = zeros if mu_ds is None else np.asarray(mu_ds, dtype=np.float64)
    return NormStats(zeros.copy(), ones.copy(), mu, ones.copy())


# ---------------------------------------------------------------------------
# Training on toys with known solutions.
# ---------------------------------------------------------------------------

def test_constant_dynamics_regression():
    batch = toy_batch(50, 200)  # s_next = s, so every target is zero
    _, mses = train_ensemble(batch, k=1, epochs=5, learning_rate=2e-2, patience=10)
    assert mses[0] < 1e-6


def test_linear_dynamics_regression():
    def shift(s, a):
        return EnvState(s.x + 0.1 * a, s.theta, s.x_dot, s.theta_dot)

    batch = toy_batch(50, 200, seed=1, next_state=shift)
    model, _ = train_ensemble(batch, k=1, epochs=15, learning_rate=2e-2, patience=20)
    rng = np.random.default_rng(2)
    s = np.column_stack([rng.uniform(-2, 2, 200), rng.uniform(-3, 3, 200),
                         rng.uniform(-1, 1, 200), rng.uniform(-2, 2, 200)])
    a = rng.uniform(-2, 2, 200)
    pred = predict_mean_array(model, s, a)
    want = s.copy()
    want[:, 0] += 0.1 * a
    assert float(((pred - want) ** 2).mean()) < 1e-5


def test_train_rejects_tiny_batch():
    with pytest.raises(ValueError, match="transitions"):
        train_ensemble(toy_batch(2, 10), k=1, epochs=1)


def test_train_rejects_bad_k():
    with pytest.raises(ValueError):
        train_ensemble(toy_batch(10, 100), k=0, epochs=1)


def test_training_deterministic():
    batch = toy_batch(10, 100, seed=3)
    a, _ = train_ensemble(batch, k=2, epochs=2, seed=7)
    b, _ = train_ensemble(batch, k=2, epochs=2, seed=7)
    assert phi_hash(a) == phi_hash(b)
    c, _ = train_ensemble(batch, k=2, epochs=2, seed=8)
    assert phi_hash(a) != phi_hash(c)


# ---------------------------------------------------------------------------
# Mean prediction.
# ---------------------------------------------------------------------------

def test_single_member_mean_matches_manual_denormalization():
    member = mlp_init(MODEL_DIMS, "identity", seed=5)
    norm = NormStats(np.array([0.1, 0.0, -0.2, 0.3]), np.array([1.5, 1.8, 0.7, 2.1]),
                     np.array([0.01, -0.02, 0.0, 0.03]), np.array([0.2, 0.1, 0.3, 0.4]))
    model = EnsembleModel(members=[member], norm=norm, frozen=True)
    s = EnvState(0.4, 2.9, -0.3, 1.1)
    a = 0.8
    got = predict_mean(model, s, a)

    z = (s.as_array() - norm.mu_s) / norm.sigma_s
    raw = mlp_forward(member, np.concatenate([z, [a]]))
    want = s.as_array() + norm.mu_ds + norm.sigma_ds * raw
    want[1] = (want[1] + math.pi) % (2 * math.pi) - math.pi
    np.testing.assert_allclose(got.as_array(), want, atol=1e-12)


def test_opposite_constant_members_cancel():
    c = np.array([0.7, 0.2, -0.5, 1.0])
    mu_ds = np.array([0.05, -0.1, 0.2, 0.0])
    model = EnsembleModel(members=[constant_member(c), constant_member(-c)],
                          norm=unit_norm(mu_ds), frozen=True)
    s = np.array([[0.5, 1.0, -0.4, 0.9]])
    pred = predict_mean_array(model, s, np.array([0.3]))
    np.testing.assert_allclose(pred, s + mu_ds, atol=1e-15)


def test_mean_permutation_invariant():
    rng = np.random.default_rng(4)
    members = [mlp_init(MODEL_DIMS, "identity", seed=i) for i in range(4)]
    norm = unit_norm()
    fwd = EnsembleModel(members=members, norm=norm, frozen=True)
    rev = EnsembleModel(members=members[::-1], norm=norm, frozen=True)
    s = rng.uniform(-1, 1, size=(10, 4))
    a = rng.uniform(-2, 2, size=10)
    np.testing.assert_allclose(predict_mean_array(fwd, s, a),
                               predict_mean_array(rev, s, a), atol=1e-12)


def test_scalar_and_array_prediction_agree():
    model = EnsembleModel(members=[mlp_init(MODEL_DIMS, "identity", seed=9)],
                          norm=unit_norm(), frozen=True)
    s = EnvState(0.2, -1.0, 0.5, -0.7)
    got = predict_mean(model, s, -1.2)
    want = predict_mean_array(model, s.as_array()[None, :], np.array([-1.2]))[0]
    np.testing.assert_array_equal(got.as_array(), want)


def test_taped_prediction_matches_array_path():
    members = [mlp_init(MODEL_DIMS, "identity", seed=i) for i in range(3)]
    model = EnsembleModel(members=members, norm=unit_norm(), frozen=True)
    rng = np.random.default_rng(6)
    s = rng.uniform(-1, 1, size=(8, 4))
    a = rng.uniform(-2, 2, size=(8, 1))
    out = predict_mean_taped(Tape(), model, Var(s), Var(a))
    np.testing.assert_allclose(out.data, predict_mean_array(model, s, a[:, 0]),
                               atol=1e-12)


def test_input_gradient_matches_fd():
    members = [mlp_init(MODEL_DIMS, "identity", seed=10 + i) for i in range(3)]
    model = EnsembleModel(members=members, norm=unit_norm(), frozen=True)
    rng = np.random.default_rng(7)
    s0 = rng.uniform(-1, 1, size=(4, 4))
    a0 = rng.uniform(-1.5, 1.5, size=(4, 1))

    tape = Tape()
    s, a = Var(s0), Var(a0)
    tape.backward(sum_all(tape, predict_mean_taped(tape, model, s, a)))

    def loss(sv, av):
        return predict_mean_array(model, sv, av[:, 0]).sum()

    h = 1e-6
    fd_s = np.zeros_like(s0)
    for i in range(s0.shape[0]):
        for j in range(4):
            up, dn = s0.copy(), s0.copy()
            up[i, j] += h
            dn[i, j] -= h
            fd_s[i, j] = (loss(up, a0) - loss(dn, a0)) / (2 * h)
    fd_a = np.zeros_like(a0)
    for i in range(a0.shape[0]):
        up, dn = a0.copy(), a0.copy()
        up[i, 0] += h
        dn[i, 0] -= h
        fd_a[i, 0] = (loss(s0, up) - loss(s0, dn)) / (2 * h)

    denom = max(np.abs(fd_s).max(), np.abs(fd_a).max(), 1e-6)
    assert np.abs(s.grad - fd_s).max() / denom < 1e-4
    assert np.abs(a.grad - fd_a).max() / denom < 1e-4


def test_taped_prediction_never_writes_weights():
    members = [mlp_init(MODEL_DIMS, "identity", seed=20)]
    model = EnsembleModel(members=members, norm=unit_norm(), frozen=True)
    before = phi_hash(model)
    rng = np.random.default_rng(8)
    tape = Tape()
    out = predict_mean_taped(tape, model, Var(rng.uniform(-1, 1, (5, 4))),
                             Var(rng.uniform(-1, 1, (5, 1))))
    tape.backward(sum_all(tape, out))
    assert phi_hash(model) == before


# ---------------------------------------------------------------------------
# Model report.
# ---------------------------------------------------------------------------

def test_oracle_model_has_zero_drift():
    batch = generate_batch(10, 30, seed=13)
    report = model_report(env_step_array, batch, horizons=(1, 5, 10))
    for h, per_dim in report.drift.items():
        np.testing.assert_allclose(per_dim, np.zeros(4), atol=1e-12)
    assert report.violation_fraction <= 0.5  # ties at zero drift are fine


def test_h1_drift_equals_one_step_rmse():
    batch = toy_batch(10, 100, seed=14)
    model, _ = train_ensemble(batch, k=1, epochs=2)
    report = model_report(model, batch, horizons=(1, 5))
    np.testing.assert_array_equal(report.drift[1], report.one_step_rmse)


def test_report_rejects_horizon_beyond_episode():
    batch = toy_batch(10, 100, seed=15)
    model, _ = train_ensemble(batch, k=1, epochs=1)
    with pytest.raises(ValueError):
        model_report(model, batch, horizons=(125,))


# ---------------------------------------------------------------------------
# Checkpointing.
# ---------------------------------------------------------------------------

def test_save_load_round_trip(tmp_path):
    batch = toy_batch(10, 100, seed=16)
    model, mses = train_ensemble(batch, k=2, epochs=2, seed=1)
    save_ensemble(model, tmp_path / "ens", holdout_mses=mses, seed=1)
    back, manifest = load_ensemble(tmp_path / "ens")
    assert phi_hash(back) == phi_hash(model)
    assert back.frozen and back.k == 2
    assert back.holdout_episodes == model.holdout_episodes
    assert manifest["holdout_mses"] == mses
    for name in ("mu_s", "sigma_s", "mu_ds", "sigma_ds"):
        np.testing.assert_array_equal(getattr(back.norm, name),
                                      getattr(model.norm, name))


def test_load_detects_tampered_member(tmp_path):
    model, _ = train_ensemble(toy_batch(10, 100, seed=17), k=1, epochs=1)
    save_ensemble(model, tmp_path / "ens")
    member = tmp_path / "ens" / "member_00.json"
    member.write_text(member.read_text().replace("0.", "1.", 1))
    with pytest.raises(ValueError, match="hash"):
        load_ensemble(tmp_path / "ens")
