"""
Quadruped kinematic model: leg geometry, horizontal frames, forward and
analytic inverse kinematics.

Frames: base x forward, y left, z up. Each leg chain is hip abduction/adduction
(about base x), hip flexion/extension and knee flexion/extension (both about the
rotated y axis). Joint angles are zero with the leg hanging straight down.
"""
import math
from dataclasses import dataclass, replace

import numpy as np

from models import LEGS, LegIndex
from utils.errors import GimbalError, WorkspaceError

COS_TOLERANCE = 1e-12


def rot_x(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def wrap_angle(angle):
    """Wrap to (-pi, pi]."""
    wrapped = math.remainder(angle, 2.0 * math.pi)
    return math.pi if wrapped == -math.pi else wrapped


def box_inertia(mass, size):
    a, b, c = size
    return np.diag([mass * (b * b + c * c) / 12.0, mass * (a * a + c * c) / 12.0, mass * (a * a + b * b) / 12.0])


@dataclass(frozen=True)
class RobotModel:
    """Geometry and mass properties of the quadruped."""
    hip_offsets: np.ndarray        # (4, 3) HAA joint positions in the base frame
    abduction_offset: float
    thigh_length: float
    shank_length: float
    nominal_reach: float
    joint_limits: np.ndarray       # (3, 2) per joint type: HAA, HFE, KFE
    torque_limit: float
    base_mass: float
    base_inertia: np.ndarray       # (3, 3)
    base_size: tuple
    link_masses: tuple             # abduction link, thigh, shank
    link_radius: float
    gravity: float = 9.81

    def __post_init__(self):
        if self.thigh_length <= 0 or self.shank_length <= 0:
            raise WorkspaceError('Link lengths must be positive')
        if self.nominal_reach >= self.thigh_length + self.shank_length:
            raise WorkspaceError('Nominal reach must be shorter than the stretched leg')
        left, right = self.hip_offsets[LegIndex.LF], self.hip_offsets[LegIndex.RF]
        if not np.allclose(left * [1, -1, 1], right):
            raise WorkspaceError('Hip offsets must be mirror-symmetric')

    @classmethod
    def from_config(cls, robot):
        """Build from a RobotConfig section."""
        hx, hy = robot.hip_offset_x, robot.hip_offset_y
        hips = np.array([[leg.fore * hx, leg.side * hy, 0.0] for leg in LEGS])
        return cls(
            hip_offsets=hips,
            abduction_offset=robot.abduction_offset,
            thigh_length=robot.thigh_length,
            shank_length=robot.shank_length,
            nominal_reach=robot.nominal_reach,
            joint_limits=np.array([robot.haa_limits, robot.hfe_limits, robot.kfe_limits], dtype=float),
            torque_limit=robot.torque_limit,
            base_mass=robot.base_mass,
            base_inertia=box_inertia(robot.base_mass, robot.base_size),
            base_size=tuple(robot.base_size),
            link_masses=tuple(robot.link_masses),
            link_radius=robot.link_radius,
            gravity=robot.gravity,
        )

    @property
    def leg_length(self):
        return self.thigh_length + self.shank_length

    @property
    def max_reach(self):
        """Largest hip-to-foot distance."""
        return math.hypot(self.abduction_offset, self.leg_length)

    @property
    def total_mass(self):
        return self.base_mass + 4.0 * sum(self.link_masses)

    @property
    def total_weight(self):
        """mg in newtons."""
        return self.total_mass * self.gravity

    def with_base_mass(self, mass):
        """Copy with a different base mass; inertia scales with it."""
        return replace(self, base_mass=mass, base_inertia=self.base_inertia * (mass / self.base_mass))

    def with_mass_scaling(self, base_factor, link_factors):
        """Copy with the base mass scaled and per-link masses scaled."""
        scaled = self.with_base_mass(self.base_mass * base_factor)
        return replace(scaled, link_masses=tuple(m * f for m, f in zip(self.link_masses, link_factors)))

    def clip_joints(self, q):
        """Clip a (12,) joint vector to the joint limits."""
        limits = np.tile(self.joint_limits, (4, 1))
        return np.clip(q, limits[:, 0], limits[:, 1])

    def stance_joints(self):
        """Joint angles with every foot at the nominal stance point."""
        q = np.zeros(12)
        for leg in LEGS:
            target = np.array([0.0, leg.side * self.abduction_offset, -self.nominal_reach])
            q[3 * leg:3 * leg + 3] = inverse_kinematics(target, leg, self)
        return q


@dataclass(frozen=True)
class HorizontalFrame:
    """Gravity-aligned frame below a hip, following the base yaw."""
    origin: np.ndarray
    yaw: float

    @property
    def rotation(self):
        return rot_z(self.yaw)

    def to_world(self, point):
        return self.origin + self.rotation @ np.asarray(point, dtype=float)


def base_yaw(base_rotation):
    """Yaw of the base x axis projected on the horizontal plane."""
    bx = base_rotation[:, 0]
    if math.hypot(bx[0], bx[1]) < 1e-9:
        raise GimbalError('Base x axis is parallel to gravity', payload={'base_x': bx.tolist()})
    return math.atan2(bx[1], bx[0])


def horizontal_frame(base_pose, leg, model):
    """
    Horizontal frame of a leg.

    Args:
        base_pose: (position, rotation matrix) of the base in the world
        leg: LegIndex
        model: RobotModel

    Returns:
        HorizontalFrame: origin at the hip lowered by the nominal reach along
        world z, yaw equal to the base yaw

    Raises:
        GimbalError: If the base x axis is vertical
    """
    position, rotation = base_pose
    yaw = base_yaw(rotation)
    hip = np.asarray(position, dtype=float) + rotation @ model.hip_offsets[leg]
    return HorizontalFrame(origin=hip - np.array([0.0, 0.0, model.nominal_reach]), yaw=yaw)


def horizontal_to_hip(target, frame, base_pose, leg, model):
    """Convert a foot target from a horizontal frame into the hip frame used by the IK."""
    position, rotation = base_pose
    hip = np.asarray(position, dtype=float) + rotation @ model.hip_offsets[leg]
    return rotation.T @ (frame.to_world(target) - hip)


def forward_kinematics(q, leg, model):
    """Foot position in the hip frame for joint angles q = (haa, hfe, kfe)."""
    q1, q2, q3 = q
    side = LegIndex(leg).side
    l1, l2 = model.thigh_length, model.shank_length
    x = -l1 * math.sin(q2) - l2 * math.sin(q2 + q3)
    z_sag = -l1 * math.cos(q2) - l2 * math.cos(q2 + q3)
    y_sag = side * model.abduction_offset
    c1, s1 = math.cos(q1), math.sin(q1)
    return np.array([x, y_sag * c1 - z_sag * s1, y_sag * s1 + z_sag * c1])


def inverse_kinematics(target, leg, model):
    """
    Analytic IK on the knee-backward branch (knee angle <= 0).

    Args:
        target: Foot position in the hip frame (m)
        leg: LegIndex
        model: RobotModel

    Returns:
        np.ndarray: (haa, hfe, kfe) in radians

    Raises:
        WorkspaceError: If the target cannot be reached
    """
    x, y, z = (float(v) for v in target)
    side = LegIndex(leg).side
    d = model.abduction_offset
    l1, l2 = model.thigh_length, model.shank_length

    rho_sq = y * y + z * z
    if rho_sq < d * d:
        raise WorkspaceError('Target inside the abduction offset', payload={'target': [x, y, z]})
    z_sag = -math.sqrt(rho_sq - d * d)
    q1 = wrap_angle(math.atan2(z, y) - math.atan2(z_sag, side * d))

    cos_knee = (x * x + z_sag * z_sag - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)
    if cos_knee > 1.0 + COS_TOLERANCE or cos_knee < -1.0 - COS_TOLERANCE:
        raise WorkspaceError('Target outside the leg workspace', payload={'target': [x, y, z]})
    q3 = -math.acos(min(1.0, max(-1.0, cos_knee)))
    q2 = math.atan2(-x, -z_sag) - math.atan2(l2 * math.sin(q3), l1 + l2 * math.cos(q3))
    return np.array([q1, q2, q3])


def clamp_to_workspace(target, leg, model, fraction=0.98):
    """Pull a hip-frame target back inside the reachable set."""
    p = np.asarray(target, dtype=float).copy()
    reach = fraction * model.max_reach
    dist = np.linalg.norm(p)
    if dist > reach:
        p *= reach / dist

    d = model.abduction_offset
    rho = math.hypot(p[1], p[2])
    min_rho = d * (1.0 + 1e-6)
    if rho < min_rho:
        if rho < 1e-12:
            p[1], p[2] = LegIndex(leg).side * min_rho, 0.0
        else:
            p[1:] *= min_rho / rho

    inner = abs(model.thigh_length - model.shank_length) * 1.02
    sag = math.sqrt(max(p[1] ** 2 + p[2] ** 2 - d * d, 0.0))
    r = math.hypot(p[0], sag)
    if inner > 0 and r < inner:
        scale = inner / max(r, 1e-12)
        new_sag = sag * scale
        p[0] *= scale
        angle = math.atan2(p[2], p[1])
        new_rho = math.hypot(d, new_sag)
        p[1], p[2] = new_rho * math.cos(angle), new_rho * math.sin(angle)
    return p
