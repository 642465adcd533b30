"""Evaluation protocols: grid returns, scenario flags, transfer checks,
and the conditioning probe.

Heavy-policy quality is the acceptance suite's business; here the policies
are untrained and the assertions target protocol arithmetic (means, stderr,
shared start sets, flag definitions, serialization determinism).
"""
import json
import math

import numpy as np
import pytest

from vop.cartpole import (EnvState, Objective, env_step, env_step_array,
                          reward, run_episode)
from vop.dataset import generate_batch
from vop.ensemble import train_ensemble
from vop.evaluate import (TABLE_OBJECTIVES, EvalReport, closed_loop_returns,
                          conditioning_gap, ends_balanced, evaluate_grid,
                          make_start_states, mid_swing_states,
                          objective_label, objective_switch_scenario,
                          random_policy_returns, report_to_dict, save_report,
                          save_trajectory_csv, specialist_population,
                          transfer_check)
from vop.trainer import as_policy_fn, policy_action, policy_init

from test_trainer import unit_norm


@pytest.fixture(scope="module")
def quick_model():
    batch = generate_batch(10, 100, seed=21)
    model, _ = train_ensemble(batch, k=1, epochs=2, seed=0)
    return model


# ---------------------------------------------------------------------------
# Start sets and returns.
# ---------------------------------------------------------------------------

def test_start_states_deterministic_and_at_rest():
    a = make_start_states(20, seed=0)
    b = make_start_states(20, seed=0)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (20, 4)
    assert np.all(a[:, 2:] == 0.0)
    assert np.all(np.abs(a[:, 0]) <= 2.5)
    c = make_start_states(20, seed=1)
    assert not np.array_equal(a, c)


def test_closed_loop_matches_run_episode_oracle():
    policy = policy_init(unit_norm(), seed=2)
    start = EnvState(0.5, 2.0, 0.0, 0.0)
    obj = Objective(-1.0, 1.5)
    got = closed_loop_returns(policy, start.as_array()[None, :],
                              obj.as_array()[None, :], steps=40)[0]
    ep = run_episode(as_policy_fn(policy), obj, start, steps=40)
    assert got == pytest.approx(ep.total_return, abs=1e-9)


def test_random_policy_returns_negative_and_deterministic():
    starts = make_start_states(10, seed=3)
    omegas = np.tile([[0.0, 2.0]], (10, 1))
    a = random_policy_returns(starts, omegas, steps=50, seed=0)
    b = random_policy_returns(starts, omegas, steps=50, seed=0)
    np.testing.assert_array_equal(a, b)
    assert np.all(a < 0)


# ---------------------------------------------------------------------------
# Objective grid.
# ---------------------------------------------------------------------------

def test_objective_labels():
    assert objective_label(Objective(-1.0, 0.0)) == "(-1,0)"
    assert objective_label(Objective(0.0, 1.0)) == "(0,1)"
    assert objective_label(None) == "resampled"


def test_grid_aggregates_are_seed_means(quick_model):
    policies = [policy_init(quick_model.norm, seed=s) for s in range(3)]
    report = evaluate_grid(policies, quick_model,
                           objectives=(Objective(-1, 0), Objective(0, 1)),
                           n_starts=5, steps=10, seed=0)
    assert report.n_seeds == 3 and report.n_starts == 5
    assert [r.label for r in report.rows] == ["(-1,0)", "(0,1)", "resampled"]
    for row in report.rows:
        assert len(row.real_by_seed) == 3
        assert row.real_mean == pytest.approx(np.mean(row.real_by_seed), abs=1e-12)
        assert row.virtual_mean == pytest.approx(np.mean(row.virtual_by_seed), abs=1e-12)
        want_se = np.std(row.real_by_seed, ddof=1) / math.sqrt(3)
        assert row.real_stderr == pytest.approx(want_se, abs=1e-12)
    fixed = report.row("(-1,0)")
    assert fixed.omega_x == -1.0 and fixed.omega_theta == 0.0
    resampled = report.row("resampled")
    assert resampled.omega_x is None and resampled.omega_theta is None
    with pytest.raises(KeyError):
        report.row("(9,9)")


def test_grid_single_seed_reproducible(quick_model):
    policies = [policy_init(quick_model.norm, seed=0)]
    kw = dict(objectives=(Objective(0, 1),), n_starts=4, steps=8, seed=5)
    a = evaluate_grid(policies, quick_model, **kw)
    b = evaluate_grid(policies, quick_model, **kw)
    assert report_to_dict(a) == report_to_dict(b)
    assert a.rows[0].real_stderr == 0.0  # single seed: no spread estimate


def test_grid_real_row_matches_direct_returns(quick_model):
    # same shared start set, stepped directly, must reproduce the row mean
    policy = policy_init(quick_model.norm, seed=4)
    obj = Objective(-1.0, 0.0)
    report = evaluate_grid([policy], quick_model, objectives=(obj,),
                           n_starts=6, steps=12, seed=9)
    starts = make_start_states(6, seed=9)
    omegas = np.tile(obj.as_array(), (6, 1))
    want = float(closed_loop_returns(policy, starts, omegas, steps=12).mean())
    assert report.row("(-1,0)").real_mean == pytest.approx(want, abs=1e-12)


def test_default_grid_objectives():
    assert [objective_label(o) for o in TABLE_OBJECTIVES] == \
        ["(-1,0)", "(-1,3)", "(0,1)", "(1,2)"]


# ---------------------------------------------------------------------------
# Objective-switch scenario.
# ---------------------------------------------------------------------------

def test_scenario_schedule_and_trajectory_consistency():
    policy = policy_init(unit_norm(), seed=6)
    res = objective_switch_scenario(policy, omega_theta=3.0, switch_step=20,
                                    steps=50)
    assert res.states.shape == (51, 4)
    assert res.actions.shape == (50,) and res.omegas.shape == (50, 2)
    np.testing.assert_array_equal(res.omegas[:20, 0], np.full(20, -1.0))
    np.testing.assert_array_equal(res.omegas[20:, 0], np.full(30, 1.0))
    np.testing.assert_array_equal(res.omegas[:, 1], np.full(50, 3.0))
    # replay: every transition must be one env_step of the recorded action
    for t in range(50):
        s = EnvState(*res.states[t])
        want = env_step(s, float(res.actions[t]))
        np.testing.assert_allclose(res.states[t + 1], want.as_array(), atol=1e-12)
        assert res.actions[t] == policy_action(policy, s, Objective(*res.omegas[t]))
        assert res.rewards[t] == pytest.approx(
            reward(EnvState(*res.states[t + 1]), Objective(*res.omegas[t])))


def test_scenario_flags_for_inert_policy():
    # zero-weight policy never acts: pole hangs (|theta| = pi), cart stays put
    policy = policy_init(unit_norm(), seed=0)
    for w in policy.net.weights:
        w[...] = 0.0
    res = objective_switch_scenario(policy, omega_theta=1.0, steps=60,
                                    switch_step=30)
    assert not res.reached_target
    assert not res.held_pole
    assert res.swung_through  # hanging already exceeds pi/2
    assert res.first_reach_step is None


def test_scenario_default_start_is_far_corner():
    policy = policy_init(unit_norm(), seed=7)
    res = objective_switch_scenario(policy, omega_theta=2.0, steps=5,
                                    switch_step=2)
    np.testing.assert_array_equal(res.states[0], [-2.5, -math.pi, 0.0, 0.0])


# ---------------------------------------------------------------------------
# Transfer check.
# ---------------------------------------------------------------------------

def test_transfer_oracle_substitution_collapses_divergence():
    policy = policy_init(unit_norm(), seed=8)
    res = transfer_check(policy, env_step_array, Objective(0.0, 2.0), steps=30)
    np.testing.assert_allclose(res.divergence, np.zeros(31), atol=1e-12)
    np.testing.assert_allclose(res.virtual_states, res.real_states, atol=1e-12)


def test_transfer_divergence_layout(quick_model):
    policy = policy_init(quick_model.norm, seed=9)
    res = transfer_check(policy, quick_model, Objective(0.0, 1.0), steps=25)
    assert res.divergence.shape == (26,)
    assert res.divergence[0] == 0.0
    assert res.real_states.shape == res.virtual_states.shape == (26, 4)
    # step-1 divergence is exactly the one-step prediction error norm
    from vop.ensemble import predict_mean_array
    a0 = res.real_actions[0]
    pred = predict_mean_array(quick_model, res.real_states[0][None, :],
                              np.array([a0]))[0]
    diff = pred - res.real_states[1]
    diff[1] = (diff[1] + math.pi) % (2 * math.pi) - math.pi
    assert res.divergence[1] == pytest.approx(float(np.linalg.norm(diff)), abs=1e-12)


def test_ends_balanced_window_logic():
    good = np.zeros((100, 4))
    good[:, 0] = 1.0
    assert ends_balanced(good, Objective(1.0, 3.0))
    assert not ends_balanced(good, Objective(0.0, 3.0))  # cart off target
    tipped = good.copy()
    tipped[-5, 1] = 0.6
    assert not ends_balanced(tipped, Objective(1.0, 3.0))
    early_bad = good.copy()
    early_bad[:40, 1] = 3.0  # outside the final window: ignored
    assert ends_balanced(early_bad, Objective(1.0, 3.0))


# ---------------------------------------------------------------------------
# Conditioning probe.
# ---------------------------------------------------------------------------

def test_mid_swing_filter_and_determinism():
    rng = np.random.default_rng(10)
    states = rng.uniform(-1, 1, size=(500, 4))
    states[:, 1] = rng.uniform(-math.pi, math.pi, size=500)
    picked = mid_swing_states(states, n=50, seed=0)
    assert picked.shape == (50, 4)
    theta = np.abs(picked[:, 1])
    assert np.all(theta > 0.4) and np.all(theta < math.pi - 0.4)
    np.testing.assert_array_equal(picked, mid_swing_states(states, n=50, seed=0))


def test_mid_swing_insufficient_pool_rejected():
    states = np.zeros((100, 4))  # every pole angle is 0: nothing mid-swing
    with pytest.raises(ValueError):
        mid_swing_states(states, n=10, seed=0)


def test_conditioning_gap_zero_for_objective_blind_policy():
    policy = policy_init(unit_norm(), seed=11)
    policy.net.weights[0][:, 4:] = 0.0  # sever both objective inputs
    states = np.tile([[0.0, 2.0, 0.0, 0.0]], (30, 1))
    assert conditioning_gap(policy, states) == 0.0


def test_conditioning_gap_positive_when_policy_reads_omega():
    policy = policy_init(unit_norm(), seed=12)
    policy.net.weights[0][:, 5] += 0.5  # strengthen the omega_theta input
    rng = np.random.default_rng(13)
    states = rng.uniform(-1, 1, size=(30, 4))
    states[:, 1] = rng.uniform(0.5, 2.0, size=30)
    assert conditioning_gap(policy, states) > 0.05


# ---------------------------------------------------------------------------
# Serialization.
# ---------------------------------------------------------------------------

def test_report_json_and_csv_deterministic(tmp_path, quick_model):
    policies = [policy_init(quick_model.norm, seed=s) for s in range(2)]
    report = evaluate_grid(policies, quick_model, objectives=(Objective(0, 1),),
                           n_starts=3, steps=6, seed=2)
    j1, c1 = tmp_path / "r1.json", tmp_path / "r1.csv"
    j2, c2 = tmp_path / "r2.json", tmp_path / "r2.csv"
    save_report(report, j1, c1)
    save_report(report, j2, c2)
    assert j1.read_bytes() == j2.read_bytes()
    assert c1.read_bytes() == c2.read_bytes()

    doc = json.loads(j1.read_text())
    assert doc["rows"][0]["label"] == "(0,1)"
    assert doc["n_seeds"] == 2
    header = c1.read_text().splitlines()[0]
    assert header == ("label,omega_x,omega_theta,real_mean,real_stderr,"
                      "virtual_mean,virtual_mean_h65")
    # round-trip through repr keeps full precision
    row = json.loads(j1.read_text())["rows"][0]
    assert row["real_mean"] == report.rows[0].real_mean


def test_trajectory_csv_layout(tmp_path):
    policy = policy_init(unit_norm(), seed=14)
    res = objective_switch_scenario(policy, omega_theta=2.0, steps=8,
                                    switch_step=4)
    path = tmp_path / "traj.csv"
    save_trajectory_csv(path, res.states, res.actions, res.rewards, res.omegas)
    lines = path.read_text().splitlines()
    assert lines[0] == "t,x,theta,x_dot,theta_dot,a,r,omega_x,omega_theta"
    assert len(lines) == 1 + 8 + 1  # header, one per step, terminal state
    first = lines[1].split(",")
    assert first[0] == "0"
    assert float(first[1]) == res.states[0, 0]
    assert float(first[6]) == res.rewards[0]
    last = lines[-1].split(",")
    assert last[0] == "8"
    assert last[5] == "" and last[6] == ""  # no action/reward on the last row


def test_specialist_population_fixes_omega():
    batch = generate_batch(5, 40, seed=22)
    from vop.trainer import TrainConfig
    cfg = TrainConfig(population=25, epochs=1)
    pop = specialist_population(batch, cfg, Objective(-1.0, 3.0))
    assert len(pop) == 25
    np.testing.assert_array_equal(pop.omegas,
                                  np.tile([[-1.0, 3.0]], (25, 1)))
