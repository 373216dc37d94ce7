"""
Quadruped simulator: floating base with 12 PD-actuated joints, penalty contacts
with regularized Coulomb friction, external base force and randomization hooks.

Timing: physics at `physics_dt`, PD torques refreshed at `pd_rate` and held in
between, joint history sampled every `history_dt`.
"""
import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.spatial.transform import Rotation

from dynamics import NV, RigidBodyModel, leg_frames
from models import ContactReport, DisturbanceSchedule, SimState
from terrain import TerrainType, penetration, sample_friction
from utils.errors import SimulationError, ValidationError

logger = logging.getLogger(__name__)

THIGH_FRACTIONS = (1.0 / 3.0, 2.0 / 3.0, 1.0)
SHANK_FRACTIONS = (0.25, 0.5, 0.75)
SLOT_TOLERANCE = 1e-9

# contact point kinds
FOOT, THIGH, SHANK, BASE = 0, 1, 2, 3


@dataclass(frozen=True)
class JointSample:
    time: float
    errors: np.ndarray
    velocities: np.ndarray


@dataclass(frozen=True)
class JointHistory:
    """Joint position errors and velocities, newest row first."""
    timestamps: np.ndarray   # (3,)
    errors: np.ndarray       # (3, 12)
    velocities: np.ndarray   # (3, 12)

    def past_errors(self):
        """24 values: errors at t - 0.01 and t - 0.02."""
        return self.errors[1:].reshape(-1)

    def past_velocities(self):
        return self.velocities[1:].reshape(-1)


class ActuatorModel:
    """PD joint actuators with a torque limit and a 100 Hz error/velocity history."""

    def __init__(self, kp, kd, torque_limit, pd_rate=400.0, history_dt=0.01):
        if torque_limit <= 0:
            raise ValidationError('Torque limit must be positive', payload={'torque_limit': torque_limit})
        self.kp = float(kp)
        self.kd = float(kd)
        self.torque_limit = float(torque_limit)
        self.pd_rate = float(pd_rate)
        self.history_dt = float(history_dt)
        self.torque = np.zeros(12)
        self._pd_tick = None
        self._samples = deque(maxlen=4)

    @classmethod
    def from_config(cls, sim_config, torque_limit):
        return cls(sim_config.kp, sim_config.kd, torque_limit, sim_config.pd_rate, sim_config.history_dt)

    def pd_torque(self, targets, q, qd):
        return np.clip(self.kp * (targets - q) - self.kd * qd, -self.torque_limit, self.torque_limit)

    def compute(self, targets, q, qd, time):
        """Torque in effect at `time`; refreshed once per PD tick."""
        tick = int(math.floor(time * self.pd_rate + SLOT_TOLERANCE))
        if tick != self._pd_tick:
            self.torque = self.pd_torque(targets, q, qd)
            self._pd_tick = tick
        return self.torque

    def _slot(self, time):
        return int(math.floor(time / self.history_dt + SLOT_TOLERANCE))

    def reset(self, targets, q, qd, time=0.0):
        """Fill the history with the initial sample at the three most recent slots."""
        self.torque = np.zeros(12)
        self._pd_tick = None
        self._samples.clear()
        slot = self._slot(time)
        errors, velocities = np.asarray(targets - q, dtype=float), np.asarray(qd, dtype=float)
        for k in (slot - 2, slot - 1, slot):
            self._samples.append(JointSample(round(k * self.history_dt, 9), errors.copy(), velocities.copy()))

    def record(self, targets, q, qd, time):
        """Store a sample for every history slot reached by `time`."""
        slot = self._slot(time)
        last = self._slot(self._samples[-1].time) if self._samples else slot - 1
        errors, velocities = targets - q, np.asarray(qd, dtype=float)
        for k in range(last + 1, slot + 1):
            self._samples.append(JointSample(round(k * self.history_dt, 9), errors.copy(), velocities.copy()))

    def history(self, targets, q, qd, time):
        """Live sample at `time` followed by the two stored samples before it."""
        current = self._slot(time)
        past = [s for s in self._samples if self._slot(s.time) < current][-2:]
        while len(past) < 2:
            past.insert(0, past[0] if past else self._samples[0])
        rows = [JointSample(time, np.asarray(targets - q, dtype=float), np.asarray(qd, dtype=float))] + past[::-1]
        return JointHistory(
            timestamps=np.array([r.time for r in rows]),
            errors=np.stack([r.errors for r in rows]),
            velocities=np.stack([r.velocities for r in rows]),
        )


def measure_joints(state, targets, actuator):
    """
    Joint position errors and velocities at t, t - 0.01 and t - 0.02.

    Args:
        state: SimState
        targets: (12,) joint targets in effect
        actuator: ActuatorModel holding the sampled history

    Returns:
        JointHistory: zero-padded with the episode's initial values during warm-up
    """
    return actuator.history(np.asarray(targets, dtype=float), state.joint_positions, state.joint_velocities,
                            state.time)


@dataclass(frozen=True)
class ObservationNoise:
    """Standard deviations of additive Gaussian observation noise."""
    joint_position: float = 0.0
    joint_velocity: float = 0.0
    linear_velocity: float = 0.0
    angular_velocity: float = 0.0
    gravity: float = 0.0

    @classmethod
    def from_config(cls, sim_config):
        return cls(sim_config.noise_joint_position, sim_config.noise_joint_velocity,
                   sim_config.noise_linear_velocity, sim_config.noise_angular_velocity, sim_config.noise_gravity)


@dataclass(frozen=True)
class Randomization:
    """Per-episode draw of friction, mass perturbations and observation noise."""
    friction: float
    base_mass_factor: float = 1.0
    link_mass_factors: tuple = (1.0, 1.0, 1.0)
    noise: ObservationNoise = field(default_factory=ObservationNoise)

    def apply(self, model):
        if self.base_mass_factor == 1.0 and all(f == 1.0 for f in self.link_mass_factors):
            return model
        return model.with_mass_scaling(self.base_mass_factor, self.link_mass_factors)


def nominal_friction(terrain_type, terrain_config):
    if TerrainType(terrain_type) is TerrainType.SLIPPERY_HILLS:
        return terrain_config.slippery_friction_mean
    return terrain_config.friction_mean


def apply_randomization(sim_config, terrain_config, rng, terrain_type=TerrainType.HILLS, friction_range=None):
    """
    Draw the episode's randomization.

    Args:
        sim_config: SimConfig section
        terrain_config: TerrainConfig section
        rng: numpy Generator
        terrain_type: Selects the friction distribution
        friction_range: (low, high) for a uniform draw in diagnostic mode

    Returns:
        Randomization: nominal values everywhere when randomization is disabled
    """
    if friction_range is not None:
        low, high = friction_range
        friction = float(rng.uniform(low, high))
    elif sim_config.randomize:
        friction = sample_friction(terrain_type, rng, terrain_config)
    else:
        friction = float(nominal_friction(terrain_type, terrain_config))

    if not sim_config.randomize:
        return Randomization(friction=friction)

    base_factor, link_factors = 1.0, (1.0, 1.0, 1.0)
    s = sim_config.mass_scaling
    if s > 0:
        factors = rng.uniform(1.0 - s, 1.0 + s, size=4)
        base_factor, link_factors = float(factors[0]), tuple(float(f) for f in factors[1:])
    noise = ObservationNoise.from_config(sim_config) if sim_config.observation_noise else ObservationNoise()
    return Randomization(friction=friction, base_mass_factor=base_factor, link_mass_factors=link_factors,
                         noise=noise)


def contact_points(model, frames, base_position, base_rotation):
    """
    Collision points of the robot.

    Returns:
        tuple: points (P, 3), leg index (P,), link index (P,), radius (P,), kind (P,)
    """
    o1, o2, feet = frames.origins[:, 1], frames.origins[:, 2], frames.feet
    thigh = np.stack([o1 + f * (o2 - o1) for f in THIGH_FRACTIONS], axis=1).reshape(12, 3)
    shank = np.stack([o2 + f * (feet - o2) for f in SHANK_FRACTIONS], axis=1).reshape(12, 3)
    a, b, c = (0.5 * s for s in model.base_size)
    local = np.array([[sx * a, sy * b, sz * c] for sx in (1, -1) for sy in (1, -1) for sz in (1, -1)]
                     + [[0.0, 0.0, -c]])
    corners = base_position + local @ base_rotation.T

    points = np.vstack([feet, thigh, shank, corners])
    legs = np.concatenate([np.arange(4), np.repeat(np.arange(4), 3), np.repeat(np.arange(4), 3),
                           np.full(len(corners), -1)])
    links = np.concatenate([np.full(4, 2), np.full(12, 1), np.full(12, 2), np.zeros(len(corners), dtype=int)])
    radius = np.concatenate([np.zeros(4), np.full(24, model.link_radius), np.zeros(len(corners))])
    kind = np.concatenate([np.full(4, FOOT), np.full(12, THIGH), np.full(12, SHANK), np.full(len(corners), BASE)])
    return points, legs, links, radius, kind


def contact_forces(bodies, frames, state, u, chol, hm, friction, sim_config, dt):
    """
    Penalty contact forces.

    Normal force k * depth - c * v_n, never negative, with the damping capped by
    the point's effective mass so that one step cannot reverse the approach
    velocity. Friction opposes the slip velocity with magnitude
    mu * F_n * min(1, |v_t| / v_stiction), also capped by the force that stops
    the slip in one step.

    Returns:
        tuple: generalized contact force (18,), ContactReport
    """
    model = bodies.model
    position = state.base_position
    rotation = state.rotation_matrix()
    points, legs, links, radius, kind = contact_points(model, frames, position, rotation)
    depth, normals = penetration(hm, points, radius)
    active = np.nonzero(depth > 0.0)[0]

    report = ContactReport(friction=friction)
    generalized = np.zeros(NV)
    if active.size == 0:
        return generalized, report

    J = bodies.point_jacobians(frames, position, points[active], legs[active], links[active])
    n = normals[active]
    v = np.einsum('pai,i->pa', J, u)
    vn = np.einsum('pa,pa->p', v, n)
    vt = v - vn[:, None] * n

    wn = np.einsum('pai,pa->pi', J, n)
    lam_n = 1.0 / np.maximum(np.einsum('pi,ip->p', wn, cho_solve(chol, wn.T)), 1e-12)
    damping = np.minimum(sim_config.contact_damping, lam_n / dt)
    fn = np.maximum(0.0, sim_config.contact_stiffness * depth[active] - damping * vn)

    speed = np.linalg.norm(vt, axis=1)
    direction = np.divide(vt, speed[:, None], out=np.zeros_like(vt), where=speed[:, None] > 1e-12)
    wt = np.einsum('pai,pa->pi', J, direction)
    lam_t = 1.0 / np.maximum(np.einsum('pi,ip->p', wt, cho_solve(chol, wt.T)), 1e-12)
    regularized = friction * fn * np.minimum(1.0, speed / sim_config.stiction_velocity)
    stopping = lam_t * speed / (dt * active.size)
    ft = np.minimum(regularized, stopping)

    forces = fn[:, None] * n - ft[:, None] * direction
    generalized = np.einsum('pai,pa->i', J, forces)

    touching = fn > 0.0
    kinds = kind[active]
    for p, point in enumerate(active):
        if not touching[p]:
            continue
        leg = legs[point]
        if kinds[p] == FOOT:
            report.foot_contact[leg] = True
            report.foot_force[leg] = forces[p]
            report.foot_normal[leg] = n[p]
        elif kinds[p] == THIGH:
            report.thigh_contact[leg] = True
        elif kinds[p] == SHANK:
            report.shank_contact[leg] = True
        else:
            report.base_contact = True
    report.normal_forces = fn
    report.tangential_forces = ft
    return generalized, report


def _check_finite(state, limit):
    value = state.max_abs()
    if not math.isfinite(value) or value > limit:
        raise SimulationError('Simulation diverged', payload={'time': state.time, 'max_abs': value})


def step(state, targets, hm, friction, disturbance=None, dt=0.001, *, model, sim_config,
         actuator=None, bodies=None):
    """
    Advance the simulation by one physics step.

    Args:
        state: SimState
        targets: (12,) joint targets (rad)
        hm: Heightmap
        friction: Coulomb coefficient
        disturbance: DisturbanceSchedule or None
        dt: Physics step (s)
        model: RobotModel
        sim_config: SimConfig section
        actuator: ActuatorModel, created from the config when omitted
        bodies: RigidBodyModel, created from the model when omitted

    Returns:
        tuple: (SimState, ContactReport)

    Raises:
        ValidationError: If a target is not finite
        SimulationError: If the state diverges
    """
    targets = np.asarray(targets, dtype=float)
    if targets.shape != (12,) or not np.all(np.isfinite(targets)):
        raise ValidationError('Joint targets must be 12 finite values')
    bodies = bodies or RigidBodyModel(model)
    if actuator is None:
        actuator = ActuatorModel.from_config(sim_config, model.torque_limit)

    rotation = state.rotation_matrix()
    frames = leg_frames(model, state.base_position, rotation, state.joint_positions)
    u = state.generalized_velocity()
    M, h = bodies.dynamics_terms(frames, state.base_position, rotation, u)
    try:
        chol = cho_factor(M)
    except LinAlgError as exc:
        raise SimulationError('Mass matrix is not positive definite', payload={'time': state.time}) from exc

    tau = actuator.compute(targets, state.joint_positions, state.joint_velocities, state.time)
    contact, report = contact_forces(bodies, frames, state, u, chol, hm, friction, sim_config, dt)

    generalized = contact - h
    generalized[6:] += tau
    if disturbance is not None:
        generalized[0:3] += disturbance.force_at(state.time)

    u_new = u + dt * cho_solve(chol, generalized)
    # positions follow the average velocity over the step
    u_mid = 0.5 * (u + u_new)
    turn = Rotation.from_rotvec(u_mid[3:6] * dt) * state.rotation()
    x, y, z, w = turn.as_quat()
    quaternion = np.array([w, x, y, z])

    new_state = SimState(
        base_position=state.base_position + dt * u_mid[0:3],
        base_orientation=quaternion / np.linalg.norm(quaternion),
        base_linear_velocity=u_new[0:3],
        base_angular_velocity=u_new[3:6],
        joint_positions=state.joint_positions + dt * u_mid[6:],
        joint_velocities=u_new[6:],
        time=state.time + dt,
    )
    _check_finite(new_state, sim_config.divergence_limit)
    return new_state, report


@dataclass
class ControlStepSummary:
    """Aggregate of the physics steps inside one control period."""
    contacts: ContactReport
    last_contacts: ContactReport
    mean_abs_torque: float
    torques: np.ndarray
    positive_work: float


class Simulator:
    """One simulated robot on one terrain. Not shared between workers."""

    def __init__(self, model, sim_config, heightmap, friction, disturbance=None):
        self.model = model
        self.config = sim_config
        self.heightmap = heightmap
        self.friction = float(friction)
        self.disturbance = disturbance or DisturbanceSchedule()
        self.bodies = RigidBodyModel(model)
        self.actuator = ActuatorModel.from_config(sim_config, model.torque_limit)
        self.dt = sim_config.physics_dt
        self.state = None
        self.targets = None
        self.steps = 0

    @property
    def substeps(self):
        return max(1, int(round(self.config.control_dt / self.dt)))

    def reset(self, state, targets=None):
        self.state = state.copy()
        self.steps = int(round(state.time / self.dt))
        self.targets = np.array(state.joint_positions if targets is None else targets, dtype=float)
        self.actuator.reset(self.targets, self.state.joint_positions, self.state.joint_velocities, self.state.time)
        return self.state

    def step(self, targets):
        """One physics step with the given joint targets."""
        self.targets = np.asarray(targets, dtype=float)
        state, report = step(self.state, self.targets, self.heightmap, self.friction, self.disturbance, self.dt,
                             model=self.model, sim_config=self.config, actuator=self.actuator, bodies=self.bodies)
        self.steps += 1
        state.time = self.steps * self.dt
        self.state = state
        self.actuator.record(self.targets, state.joint_positions, state.joint_velocities, state.time)
        return state, report

    def control_step(self, targets):
        """Hold `targets` for one control period."""
        union, last = None, None
        abs_torque, work = 0.0, 0.0
        for _ in range(self.substeps):
            _, last = self.step(targets)
            tau = self.actuator.torque
            abs_torque += float(np.abs(tau).sum())
            work += float(np.maximum(tau * self.state.joint_velocities, 0.0).sum()) * self.dt
            union = last if union is None else union.merge(last)
        return ControlStepSummary(contacts=union, last_contacts=last, mean_abs_torque=abs_torque / self.substeps,
                                  torques=self.actuator.torque.copy(), positive_work=work)

    def joint_history(self):
        return measure_joints(self.state, self.targets, self.actuator)

    def frames(self):
        return leg_frames(self.model, self.state.base_position, self.state.rotation_matrix(),
                          self.state.joint_positions)

    def foot_positions(self):
        return self.frames().feet

    def energy(self):
        """Kinetic plus potential energy of the current state."""
        rotation = self.state.rotation_matrix()
        frames = leg_frames(self.model, self.state.base_position, rotation, self.state.joint_positions)
        return self.bodies.energy(frames, self.state.base_position, rotation, self.state.generalized_velocity())
