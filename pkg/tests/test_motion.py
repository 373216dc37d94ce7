from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest

from models import Command, LEG_SIDES
from motion import (
    ActionScale,
    ControllerMode,
    FtgParams,
    Mode,
    PhaseState,
    advance_phase,
    compose_targets,
    ftg_eval,
    update_mode,
)
from utils.errors import ValidationError

PARAMS = FtgParams(foot_height=0.2, base_frequency=1.25)


@pytest.mark.parametrize('phase, expected', [
    (math.pi / 2, -0.5),
    (math.pi, -0.5),
    (1.5 * math.pi, -0.3),
    (2.0 * math.pi, -0.5),
])
def test_foot_trajectory_values(phase, expected):
    assert ftg_eval(phase, PARAMS) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize('k', [0.0, 1.0, 2.0])
def test_foot_trajectory_is_flat_at_segment_joints(k):
    phase = math.pi + k * math.pi / 2
    eps = 1e-6
    slope = (ftg_eval(phase + eps, PARAMS) - ftg_eval(phase - eps, PARAMS)) / (2 * eps)
    assert abs(slope) < 1e-5


def test_phase_wraps_after_one_gait_cycle():
    start = np.array([0.1, 1.0, 2.0, 3.0])
    state = advance_phase(PhaseState.start(start, 1.25), 0.8)
    assert np.allclose(state.phases, start, atol=1e-12)


def test_zero_frequency_keeps_phase():
    start = np.array([0.1, 1.0, 2.0, 3.0])
    state = advance_phase(PhaseState.start(start, 0.0), 0.02)
    assert np.array_equal(state.phases, start)


def test_phase_stays_in_range_when_wrapping():
    state = advance_phase(PhaseState.start([6.2, 6.2, 6.2, 6.2], 1.25), 0.02)
    assert np.all((state.phases >= 0.0) & (state.phases < 2.0 * math.pi))
    assert state.phases[0] == pytest.approx(6.2 + 2.0 * math.pi * 1.25 * 0.02 - 2.0 * math.pi)


def test_non_positive_phase_step_is_rejected():
    with pytest.raises(ValidationError):
        advance_phase(PhaseState.start(np.zeros(4), 1.25), 0.0)


def test_zero_residuals_in_stance_give_nominal_point(robot_model):
    phase = PhaseState.start(np.full(4, 0.5), 1.25)
    targets = compose_targets(phase, np.zeros(12), PARAMS, robot_model)
    expected = np.column_stack([np.zeros(4), LEG_SIDES * robot_model.abduction_offset, np.zeros(4)])
    assert np.allclose(targets, expected)


def test_residuals_shift_targets(robot_model):
    phase = PhaseState.start(np.full(4, 0.5), 1.25)
    residuals = np.zeros(12)
    residuals[0] = 0.05
    targets = compose_targets(phase, residuals, PARAMS, robot_model)
    assert targets[0, 0] == pytest.approx(0.05)


def test_large_residuals_are_clamped_to_reach_sphere(robot_model):
    phase = PhaseState.start(np.full(4, 0.5), 1.25)
    targets = compose_targets(phase, np.full(12, -2.0), PARAMS, robot_model)
    hip = np.array([0.0, 0.0, robot_model.nominal_reach])
    distances = np.linalg.norm(targets - hip, axis=1)
    assert np.allclose(distances, 0.98 * robot_model.max_reach)


def _hold(command, seconds, speed=0.0, mode=None):
    mode = mode or ControllerMode()
    for _ in range(int(round(seconds / 0.02))):
        mode = update_mode(mode, command, speed, 0.02)
    return mode


def test_zero_command_held_half_a_second_stands():
    assert _hold(Command.stop(), 0.5).state is Mode.STANDING


def test_short_zero_command_keeps_walking():
    assert _hold(Command.stop(), 0.3).state is Mode.LOCOMOTING


def test_shove_while_standing_resumes_stepping():
    standing = _hold(Command.stop(), 0.6)
    assert standing.base_frequency(PARAMS) == 0.0
    pushed = update_mode(standing, Command.stop(), 0.35, 0.02)
    assert pushed.state is Mode.LOCOMOTING
    assert pushed.base_frequency(PARAMS) == 1.25


def test_action_scale_clips_and_scales():
    offsets, residuals = ActionScale().decode(np.concatenate([np.full(4, 2.0), np.full(12, -1.0)]))
    assert np.allclose(offsets, 0.5)
    assert np.allclose(residuals.reshape(4, 3), [-0.15, -0.15, -0.10])


def test_two_half_steps_equal_one_full_step(rng):
    for _ in range(100):
        state = PhaseState.start(rng.uniform(0.0, 2.0 * math.pi, 4), rng.uniform(0.0, 3.0))
        state = replace(state, offsets=rng.uniform(-1.0, 1.0, 4))
        dt = rng.uniform(1e-3, 0.5)
        twice = advance_phase(advance_phase(state, dt), dt).phases
        once = advance_phase(state, 2.0 * dt).phases
        gap = np.angle(np.exp(1j * (twice - once)))
        assert np.all(np.abs(gap) < 1e-12)
