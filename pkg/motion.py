"""
Gait layer: leg phases, foot trajectory generator, residual composition and the
standing/locomotion state machine.
"""
import math
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from models import LEG_SIDES
from utils.errors import ValidationError
from utils.validators import Validator

TWO_PI = 2.0 * math.pi
TROT_PHASES = np.array([0.0, math.pi, math.pi, 0.0])
MODE_TOLERANCE = 1e-9


@dataclass(frozen=True)
class FtgParams:
    """Foot trajectory generator settings."""
    foot_height: float = 0.2
    base_frequency: float = 1.25

    def __post_init__(self):
        if self.foot_height <= 0:
            raise ValidationError('Foot height must be positive', payload={'foot_height': self.foot_height})

    @classmethod
    def from_config(cls, robot):
        return cls(foot_height=robot.foot_height, base_frequency=robot.base_frequency)


@dataclass(frozen=True)
class PhaseState:
    """Per-leg phases in [0, 2pi); contact for phase < pi, swing otherwise."""
    phases: np.ndarray
    initial_phases: np.ndarray
    base_frequency: float
    offsets: np.ndarray

    @classmethod
    def start(cls, initial_phases, base_frequency):
        initial = np.mod(np.asarray(initial_phases, dtype=float), TWO_PI)
        return cls(phases=initial.copy(), initial_phases=initial, base_frequency=float(base_frequency),
                   offsets=np.zeros(4))

    @property
    def frequencies(self):
        """Phase rates in rad/s."""
        return TWO_PI * (self.base_frequency + self.offsets)

    @property
    def swing(self):
        return self.phases >= math.pi

    @property
    def contact(self):
        return ~self.swing


def sample_initial_phases(rng, fixed_trot=False):
    """Uniform initial phases, or the diagonal trot pattern."""
    if fixed_trot:
        return TROT_PHASES.copy()
    return rng.uniform(0.0, TWO_PI, size=4)


def advance_phase(state, dt):
    """
    Advance every leg phase by 2pi (f0 + fi) dt.

    Raises:
        ValidationError: If dt is not positive
    """
    if dt <= 0:
        raise ValidationError('Phase step must be positive', payload={'dt': dt})
    phases = np.mod(state.phases + state.frequencies * dt, TWO_PI)
    # mod of a tiny negative number can round up to exactly 2pi
    phases = np.where(phases >= TWO_PI, 0.0, phases)
    return replace(state, phases=phases)


def ftg_eval(phase, params):
    """Vertical foot target offset: -0.5 in stance, a pair of cubic segments in swing."""
    phase = np.asarray(phase, dtype=float)
    h = params.foot_height
    k = 2.0 * (phase - math.pi) / math.pi
    rising = h * (-2.0 * k ** 3 + 3.0 * k ** 2) - 0.5
    falling = h * (2.0 * k ** 3 - 9.0 * k ** 2 + 12.0 * k - 4.0) - 0.5
    value = np.where(k < 0.0, -0.5, np.where(k <= 1.0, rising, np.where(k <= 2.0, falling, -0.5)))
    return float(value) if value.ndim == 0 else value


def compose_targets(phase, residuals, params, model, clamp_fraction=0.98):
    """
    Foot targets in each leg's horizontal frame.

    Args:
        phase: PhaseState
        residuals: 12 residuals (m), leg-major (x, y, z)
        params: FtgParams
        model: RobotModel
        clamp_fraction: Radius of the clamp sphere around the hip as a fraction of max reach

    Returns:
        np.ndarray: (4, 3) targets; the nominal stance point is (0, side * abduction offset, 0)
    """
    residuals = Validator.validate_finite(residuals, 'Residuals').reshape(4, 3)
    lift = ftg_eval(phase.phases, params) + 0.5
    base = np.column_stack([np.zeros(4), LEG_SIDES * model.abduction_offset, lift])
    targets = base + residuals

    hip = np.array([0.0, 0.0, model.nominal_reach])
    radius = clamp_fraction * model.max_reach
    rel = targets - hip
    dist = np.linalg.norm(rel, axis=1)
    scale = np.where(dist > radius, radius / np.maximum(dist, 1e-12), 1.0)
    return hip + rel * scale[:, None]


class Mode(Enum):
    STANDING = 'standing'
    LOCOMOTING = 'locomoting'


@dataclass(frozen=True)
class ControllerMode:
    state: Mode = Mode.LOCOMOTING
    zero_timer: float = 0.0

    def base_frequency(self, params):
        return 0.0 if self.state is Mode.STANDING else params.base_frequency


def update_mode(mode, command, base_speed, dt, stand_delay=0.5, disturbance_speed=0.3):
    """Standing after a zero command held for `stand_delay`; locomoting on any command or a shove."""
    if not command.is_zero or base_speed > disturbance_speed:
        return ControllerMode(Mode.LOCOMOTING, 0.0)
    timer = mode.zero_timer + dt
    if timer >= stand_delay - MODE_TOLERANCE:
        return ControllerMode(Mode.STANDING, timer)
    return ControllerMode(mode.state, timer)


@dataclass(frozen=True)
class ActionScale:
    """Maps policy outputs in [-1, 1] to frequency offsets (Hz) and residuals (m)."""
    frequency: float = 0.5
    residual_xy: float = 0.15
    residual_z: float = 0.10

    @classmethod
    def from_config(cls, robot):
        return cls(robot.frequency_scale, robot.residual_xy, robot.residual_z)

    @property
    def vector(self):
        per_leg = [self.residual_xy, self.residual_xy, self.residual_z]
        return np.concatenate([np.full(4, self.frequency), np.tile(per_leg, 4)])

    def decode(self, action):
        """Split a 16-dim action into (frequency offsets, residuals)."""
        scaled = np.clip(np.asarray(action, dtype=float), -1.0, 1.0) * self.vector
        return scaled[:4], scaled[4:]


class MotionGenerator:
    """Per-environment gait state: phases plus controller mode."""

    def __init__(self, model, params, scale, initial_phases, stand_delay=0.5, disturbance_speed=0.3):
        self.model = model
        self.params = params
        self.scale = scale
        self.stand_delay = stand_delay
        self.disturbance_speed = disturbance_speed
        self.mode = ControllerMode()
        self.phase = PhaseState.start(initial_phases, params.base_frequency)

    def step(self, action, command, base_speed, dt):
        """Apply one action: update the mode, advance phases, return (4, 3) horizontal-frame targets."""
        offsets, residuals = self.scale.decode(action)
        self.mode = update_mode(self.mode, command, base_speed, dt, self.stand_delay, self.disturbance_speed)
        self.phase = replace(self.phase, base_frequency=self.mode.base_frequency(self.params), offsets=offsets)
        self.phase = advance_phase(self.phase, dt)
        return compose_targets(self.phase, residuals, self.params, self.model)
