"""
Domain records shared across the lab.
"""
from dataclasses import dataclass, field, fields
from enum import IntEnum

import numpy as np
from scipy.spatial.transform import Rotation

from utils.errors import ValidationError


class LegIndex(IntEnum):
    """Legs in array order; `number` is the 1-based leg index."""
    LF = 0
    RF = 1
    LH = 2
    RH = 3

    @property
    def number(self):
        return int(self) + 1

    @property
    def side(self):
        """+1 for left legs, -1 for right legs."""
        return 1.0 if self in (LegIndex.LF, LegIndex.LH) else -1.0

    @property
    def fore(self):
        """+1 for front legs, -1 for hind legs."""
        return 1.0 if self in (LegIndex.LF, LegIndex.RF) else -1.0


LEGS = tuple(LegIndex)
LEG_SIDES = np.array([leg.side for leg in LEGS])
LEG_FORE = np.array([leg.fore for leg in LEGS])


@dataclass(frozen=True)
class Command:
    """Heading direction (world frame) plus turning direction."""
    heading: tuple[float, float] = (1.0, 0.0)
    turn: int = 0

    def __post_init__(self):
        hx, hy = self.heading
        norm = np.hypot(hx, hy)
        if not (norm == 0.0 or abs(norm - 1.0) < 1e-9):
            raise ValidationError('Command heading must be (0, 0) or a unit vector', payload={'norm': norm})
        if self.turn not in (-1, 0, 1):
            raise ValidationError('Turning direction must be -1, 0 or 1', payload={'turn': self.turn})

    @classmethod
    def toward(cls, angle, turn=0):
        return cls((float(np.cos(angle)), float(np.sin(angle))), turn)

    @classmethod
    def stop(cls):
        return cls((0.0, 0.0), 0)

    @property
    def is_zero(self):
        return self.heading == (0.0, 0.0) and self.turn == 0

    @property
    def has_heading(self):
        return self.heading != (0.0, 0.0)

    def direction(self):
        return np.array(self.heading, dtype=float)


@dataclass
class SimState:
    """Floating-base state. Velocities are expressed in the world frame."""
    base_position: np.ndarray
    base_orientation: np.ndarray  # unit quaternion (w, x, y, z)
    base_linear_velocity: np.ndarray
    base_angular_velocity: np.ndarray
    joint_positions: np.ndarray
    joint_velocities: np.ndarray
    time: float = 0.0

    @classmethod
    def at_rest(cls, base_position, joint_positions, yaw=0.0):
        quat = Rotation.from_euler('z', yaw).as_quat()  # x, y, z, w
        return cls(
            base_position=np.asarray(base_position, dtype=float).copy(),
            base_orientation=np.array([quat[3], quat[0], quat[1], quat[2]]),
            base_linear_velocity=np.zeros(3),
            base_angular_velocity=np.zeros(3),
            joint_positions=np.asarray(joint_positions, dtype=float).copy(),
            joint_velocities=np.zeros(12),
        )

    def rotation(self):
        w, x, y, z = self.base_orientation
        return Rotation.from_quat([x, y, z, w])

    def rotation_matrix(self):
        return self.rotation().as_matrix()

    def roll_pitch_yaw(self):
        """Intrinsic z-y-x angles returned as (roll, pitch, yaw)."""
        yaw, pitch, roll = self.rotation().as_euler('ZYX')
        return roll, pitch, yaw

    def generalized_velocity(self):
        return np.concatenate([self.base_linear_velocity, self.base_angular_velocity, self.joint_velocities])

    def copy(self):
        return SimState(**{f.name: (getattr(self, f.name).copy() if isinstance(getattr(self, f.name), np.ndarray)
                                    else getattr(self, f.name)) for f in fields(self)})

    def max_abs(self):
        return max(
            float(np.max(np.abs(self.base_position))),
            float(np.max(np.abs(self.base_linear_velocity))),
            float(np.max(np.abs(self.base_angular_velocity))),
            float(np.max(np.abs(self.joint_positions))),
            float(np.max(np.abs(self.joint_velocities))),
        )


@dataclass
class ContactReport:
    """Contacts of one physics step."""
    foot_contact: np.ndarray = field(default_factory=lambda: np.zeros(4, dtype=bool))
    foot_force: np.ndarray = field(default_factory=lambda: np.zeros((4, 3)))
    foot_normal: np.ndarray = field(default_factory=lambda: np.tile([0.0, 0.0, 1.0], (4, 1)))
    thigh_contact: np.ndarray = field(default_factory=lambda: np.zeros(4, dtype=bool))
    shank_contact: np.ndarray = field(default_factory=lambda: np.zeros(4, dtype=bool))
    base_contact: bool = False
    normal_forces: np.ndarray = field(default_factory=lambda: np.zeros(0))
    tangential_forces: np.ndarray = field(default_factory=lambda: np.zeros(0))
    friction: float = 0.0

    @property
    def body_contact_count(self):
        """Body parts (base, thighs, shanks) touching the terrain."""
        return int(self.base_contact) + int(self.thigh_contact.sum()) + int(self.shank_contact.sum())

    def merge(self, other):
        """Union of contact flags; forces and normals taken from `other`."""
        return ContactReport(
            foot_contact=self.foot_contact | other.foot_contact,
            foot_force=other.foot_force,
            foot_normal=other.foot_normal,
            thigh_contact=self.thigh_contact | other.thigh_contact,
            shank_contact=self.shank_contact | other.shank_contact,
            base_contact=self.base_contact or other.base_contact,
            normal_forces=other.normal_forces,
            tangential_forces=other.tangential_forces,
            friction=other.friction,
        )


@dataclass(frozen=True)
class DisturbanceSchedule:
    """Constant external force on the base inside [start, stop)."""
    force: tuple[float, float, float] = (0.0, 0.0, 0.0)
    start: float = 0.0
    stop: float = 0.0

    def force_at(self, t):
        if self.start <= t < self.stop:
            return np.array(self.force, dtype=float)
        return np.zeros(3)


REWARD_TERMS = ('r_lv', 'r_av', 'r_b', 'r_fc', 'r_bc', 'r_s', 'r_tau')


@dataclass
class Transition:
    """One 50 Hz control step."""
    observation: np.ndarray
    privileged: np.ndarray
    action: np.ndarray
    reward: float
    reward_terms: np.ndarray
    next_observation: np.ndarray
    next_privileged: np.ndarray
    done: bool
    terminated: bool
    label: int
    v_pr: float
    history: np.ndarray = None
    log_prob: float = 0.0


@dataclass
class TrajectoryLog:
    """Per-control-step physical quantities of one episode."""
    time: list = field(default_factory=list)
    base_position: list = field(default_factory=list)
    base_orientation: list = field(default_factory=list)
    base_linear_velocity: list = field(default_factory=list)
    base_angular_velocity: list = field(default_factory=list)
    joint_positions: list = field(default_factory=list)
    joint_velocities: list = field(default_factory=list)
    torques: list = field(default_factory=list)
    positive_power: list = field(default_factory=list)
    foot_contact: list = field(default_factory=list)
    body_contacts: list = field(default_factory=list)
    foot_positions: list = field(default_factory=list)

    def __len__(self):
        return len(self.time)

    def arrays(self):
        return {f.name: np.asarray(getattr(self, f.name)) for f in fields(self)}


@dataclass
class MetricsRecord:
    """Result of a diagnostic scenario."""
    scenario: str
    trials: int
    speed: float
    cot: float
    success_rate: float
    heading_error_deg: float
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.success_rate <= 1.0:
            raise ValidationError('Success rate must lie in [0, 1]')

    def to_dict(self):
        return {
            'scenario': self.scenario,
            'trials': self.trials,
            'speed': self.speed,
            'cot': self.cot,
            'success_rate': self.success_rate,
            'heading_error_deg': self.heading_error_deg,
            'details': self.details,
        }
