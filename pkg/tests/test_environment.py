from __future__ import annotations

import math

import numpy as np
import pytest
from scipy import stats
from scipy.spatial.transform import Rotation

from config import EnvConfig
from environment import (
    HIST_DIM,
    OBS_DIM,
    PRIV_DIM,
    LocomotionEnv,
    ProprioHistory,
    ZeroPolicy,
    compute_reward,
    label_transition,
    rollout,
    terminate,
)
from models import Command, ContactReport, SimState
from terrain import TerrainParams, TerrainType, plane_map

FLAT = TerrainParams(TerrainType.FLAT, (), seed=0)


def _moving_state(velocity, angular=(0.0, 0.0, 0.0)):
    state = SimState.at_rest([0.0, 0.0, 0.5], np.zeros(12))
    state.base_linear_velocity = np.array(velocity, dtype=float)
    state.base_angular_velocity = np.array(angular, dtype=float)
    return state


def _reward(state, command, swing=(False,) * 4, torque=0.0, contacts=None):
    feet = np.zeros((4, 3))
    return compute_reward(state, command, np.zeros((3, 12)), torque, contacts or ContactReport(), feet,
                          np.zeros((4, 9)), np.array(swing), EnvConfig())


def test_linear_velocity_reward_saturates_at_target_speed():
    _, terms = _reward(_moving_state([0.7, 0.0, 0.0]), Command.toward(0.0))
    assert terms[0] == 1.0


def test_linear_velocity_reward_when_standing_still():
    _, terms = _reward(_moving_state([0.0, 0.0, 0.0]), Command.toward(0.0))
    assert terms[0] == pytest.approx(math.exp(-0.72))
    assert terms[0] == pytest.approx(0.48675, abs=1e-5)


def test_stationary_robot_with_zero_command():
    total, terms = _reward(_moving_state([0.0, 0.0, 0.0]), Command.stop())
    r_lv, r_av, r_b, r_fc, r_bc, r_s, r_tau = terms
    assert (r_lv, r_av) == (0.0, 0.0)
    assert r_b == pytest.approx(2.0)
    assert r_fc == 1.0
    assert (r_bc, r_s, r_tau) == (0.0, 0.0, 0.0)
    weights = EnvConfig().reward_weights
    assert total == pytest.approx(weights[2] * 2.0 + weights[3])


def test_body_contact_and_torque_penalties():
    contacts = ContactReport(base_contact=True)
    contacts.shank_contact[1] = True
    _, terms = _reward(_moving_state([0.0, 0.0, 0.0]), Command.toward(0.0), torque=12.5, contacts=contacts)
    assert terms[4] == -2.0
    assert terms[6] == -12.5


def test_foot_clearance_counts_swing_feet_above_the_scan():
    feet = np.array([[0.0, 0.0, 0.1], [0.0, 0.0, 0.01], [0.0, 0.0, 0.1], [0.0, 0.0, 0.0]])
    _, terms = compute_reward(_moving_state([0.0, 0.0, 0.0]), Command.toward(0.0), np.zeros((3, 12)), 0.0,
                              ContactReport(), feet, np.zeros((4, 9)), np.array([True, True, False, False]),
                              EnvConfig())
    assert terms[3] == 0.5


@pytest.mark.parametrize('speed, terminated, expected', [
    (0.3, False, 1),
    (0.3, True, 0),
    (0.2, False, 1),
    (0.1, False, 0),
])
def test_traversability_labels(speed, terminated, expected):
    assert label_transition(_moving_state([speed, 0.0, 0.0]), terminated, Command.toward(0.0)) == expected


def test_termination_conditions():
    ground = plane_map(0.0, 0.0)
    upright = SimState.at_rest([0.0, 0.0, 0.4], np.zeros(12))
    assert not terminate(upright, ContactReport(), ground)
    assert terminate(upright, ContactReport(base_contact=True), ground)

    pitched = upright.copy()
    half = math.radians(80.0) / 2
    pitched.base_orientation = np.array([math.cos(half), 0.0, math.sin(half), 0.0])
    assert terminate(pitched, ContactReport(), ground)

    sunk = upright.copy()
    sunk.base_position[2] = -0.01
    assert terminate(sunk, None, ground)


def test_history_keeps_oldest_column_first():
    history = ProprioHistory(3, dim=2)
    assert np.array_equal(history.matrix(), np.zeros((2, 3)))
    for value in (1.0, 2.0, 3.0, 4.0):
        history.push([value, -value])
    assert np.array_equal(history.matrix(), [[2.0, 3.0, 4.0], [-2.0, -3.0, -4.0]])


def test_reset_builds_observation_and_privileged_state(quiet_config):
    env = LocomotionEnv(quiet_config, np.random.default_rng(0), history_length=20)
    env.reset(FLAT, command=Command.toward(0.0))
    assert env.observation.shape == (OBS_DIM,)
    assert env.privileged.shape == (PRIV_DIM,)
    assert env.proprio_history().shape == (HIST_DIM, 20)
    assert np.all(np.isfinite(env.observation))
    # gravity points down in a level base frame
    assert np.allclose(env.observation[3:6], [0.0, 0.0, -1.0], atol=1e-9)


def test_same_seed_gives_identical_initial_state(quiet_config):
    states = []
    for _ in range(2):
        env = LocomotionEnv(quiet_config, np.random.default_rng(42))
        states.append(env.reset(FLAT))
    assert np.array_equal(states[0].base_position, states[1].base_position)
    assert np.array_equal(states[0].joint_positions, states[1].joint_positions)
    assert np.array_equal(states[0].base_orientation, states[1].base_orientation)


def test_full_yaw_mode_spreads_headings_over_the_circle(quiet_config):
    env = LocomotionEnv(quiet_config.replace(env={'full_yaw': True}), np.random.default_rng(9))
    yaws = [env.reset(FLAT).roll_pitch_yaw()[2] for _ in range(200)]
    result = stats.kstest(yaws, stats.uniform(loc=-math.pi, scale=2 * math.pi).cdf)
    assert result.pvalue > 0.001


def test_one_control_step_produces_a_transition(quiet_config):
    env = LocomotionEnv(quiet_config, np.random.default_rng(1))
    env.reset(FLAT, command=Command.toward(0.0))
    transition = env.step(np.zeros(16))
    assert transition.observation.shape == (OBS_DIM,)
    assert transition.next_privileged.shape == (PRIV_DIM,)
    assert transition.reward_terms.shape == (7,)
    assert transition.label in (0, 1)
    assert len(env.log) == 1


@pytest.mark.slow
def test_zero_action_policy_survives_on_flat_ground(quiet_config):
    config = quiet_config.replace(env={'max_episode_length': 400})
    env = LocomotionEnv(config, np.random.default_rng(2))
    trajectory = rollout(ZeroPolicy(), env, FLAT, 400, command=Command.toward(0.0))
    assert len(trajectory) == 400
    assert not trajectory.terminated
    assert trajectory.transitions[-1].done


def _reference_reward(v, w, quat_wxyz, command, targets, torque, body_contacts, feet, scans, swing):
    weights = np.array([0.05, 0.05, 0.04, 0.01, 0.02, 0.025, 2.0e-5])
    rotation = Rotation.from_quat(np.roll(quat_wxyz, -1))
    w_body = rotation.inv().apply(w)
    d = np.array(command.heading)
    v_pr = v[0] * d[0] + v[1] * d[1]
    r_lv = 1.0 if v_pr >= 0.6 else math.exp(-2.0 * (v_pr - 0.6) ** 2)
    w_pr = w[2] * command.turn
    r_av = 1.0 if w_pr >= 0.6 else math.exp(-1.5 * (w_pr - 0.6) ** 2)
    v_o = math.hypot(v[0] - v_pr * d[0], v[1] - v_pr * d[1])
    r_b = math.exp(-1.5 * v_o ** 2) + math.exp(-1.5 * (w_body[0] ** 2 + w_body[1] ** 2))
    lifted = [feet[i, 2] > scans[i].max() + 0.02 for i in range(4) if swing[i]]
    r_fc = sum(lifted) / len(lifted) if lifted else 1.0
    r_s = -math.sqrt(sum((targets[0] - 2 * targets[1] + targets[2]) ** 2))
    terms = np.array([r_lv, r_av, r_b, r_fc, -body_contacts, r_s, -torque])
    return float(weights @ terms)


def test_reward_matches_reference_formulas():
    rng = np.random.default_rng(17)
    for _ in range(100):
        state = SimState.at_rest([0.0, 0.0, 0.5], np.zeros(12))
        quat = rng.normal(size=4)
        state.base_orientation = quat / np.linalg.norm(quat)
        state.base_linear_velocity = rng.uniform(-1.0, 1.0, 3)
        state.base_angular_velocity = rng.uniform(-1.0, 1.0, 3)
        command = Command.toward(rng.uniform(-math.pi, math.pi), int(rng.integers(-1, 2)))
        targets = rng.normal(scale=0.1, size=(3, 12))
        torque = float(rng.uniform(0.0, 100.0))
        contacts = ContactReport()
        contacts.shank_contact[:] = rng.random(4) < 0.3
        feet = rng.uniform(-0.05, 0.15, size=(4, 3))
        scans = rng.uniform(-0.05, 0.05, size=(4, 9))
        swing = rng.random(4) < 0.5

        total, _ = compute_reward(state, command, targets, torque, contacts, feet, scans, swing, EnvConfig())
        expected = _reference_reward(state.base_linear_velocity, state.base_angular_velocity,
                                     state.base_orientation, command, targets, torque,
                                     contacts.body_contact_count, feet, scans, swing)
        assert total == pytest.approx(expected, abs=1e-12)


def test_vertical_base_terminates_without_raising(quiet_config):
    env = LocomotionEnv(quiet_config, np.random.default_rng(3))
    env.reset(FLAT, command=Command.toward(0.0))
    before = env.observation.copy()
    # pitched nose-up by 90 degrees: the base x axis is parallel to gravity
    env.sim.state.base_orientation = np.array([math.cos(-math.pi / 4), 0.0, math.sin(-math.pi / 4), 0.0])
    transition = env.step(np.zeros(16))
    assert transition.terminated and transition.done
    assert transition.label == 0
    assert np.array_equal(transition.next_observation, before)
