"""
Locomotion MDP: observation and privileged-state assembly, reward terms,
termination, traversability labels and episode rollouts.
"""
import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from dynamics import leg_frames
from kinematics import (RobotModel, base_yaw, clamp_to_workspace, horizontal_frame,
                        horizontal_to_hip, inverse_kinematics)
from models import LEGS, REWARD_TERMS, Command, ContactReport, SimState, TrajectoryLog, Transition
from motion import ActionScale, FtgParams, MotionGenerator, compose_targets, sample_initial_phases
from simulator import Simulator, apply_randomization, contact_points
from terrain import TerrainType, generate, height_at, height_scan, penetration, terrain_normal
from utils.errors import EmptyTrajectoryError, GimbalError, SimulationError, SpawnError, WorkspaceError

logger = logging.getLogger(__name__)

OBS_DIM = 121
PRIV_DIM = 71
HIST_DIM = 48
ACTION_DIM = 16

# observation layout
OBS_COMMAND = slice(0, 3)
OBS_GRAVITY = slice(3, 6)
OBS_ANGULAR_VELOCITY = slice(6, 9)
OBS_LINEAR_VELOCITY = slice(9, 12)
OBS_JOINT_POSITIONS = slice(12, 24)
OBS_JOINT_VELOCITIES = slice(24, 36)
OBS_PHASES = slice(36, 44)
OBS_FREQUENCIES = slice(44, 48)
OBS_BASE_FREQUENCY = 48
OBS_ERROR_HISTORY = slice(49, 73)
OBS_VELOCITY_HISTORY = slice(73, 97)
OBS_TARGET_HISTORY = slice(97, 121)

# privileged layout
PRIV_NORMALS = slice(0, 12)
PRIV_SCANS = slice(12, 48)
PRIV_FORCES = slice(48, 52)
PRIV_FOOT_CONTACT = slice(52, 56)
PRIV_THIGH_CONTACT = slice(56, 60)
PRIV_SHANK_CONTACT = slice(60, 64)
PRIV_CONTACTS = slice(52, 64)
PRIV_FRICTION = slice(64, 68)
PRIV_EXTERNAL_FORCE = slice(68, 71)
PRIV_CONTINUOUS = np.r_[0:52, 64:71]


def sample_command(rng, env_config):
    """Uniform world heading, a stop with small probability, turning direction from the configured weights."""
    if rng.random() < env_config.stop_probability:
        return Command.stop()
    angle = rng.uniform(-math.pi, math.pi)
    turn = int(rng.choice([-1, 0, 1], p=np.asarray(env_config.turn_probabilities, dtype=float)))
    return Command.toward(angle, turn)


def projected_velocity(state, command):
    """v_pr: horizontal base velocity along the commanded heading (0 for a stop command)."""
    return float(state.base_linear_velocity[:2] @ command.direction())


def base_frame_vectors(state):
    """Gravity direction, angular and linear velocity in the base frame."""
    R = state.rotation_matrix()
    gravity = R.T @ np.array([0.0, 0.0, -1.0])
    return gravity, R.T @ state.base_angular_velocity, R.T @ state.base_linear_velocity


def command_features(state, command):
    """Heading rotated into the base yaw frame, then the turning direction."""
    yaw = base_yaw(state.rotation_matrix())
    c, s = math.cos(yaw), math.sin(yaw)
    hx, hy = command.heading
    return np.array([c * hx + s * hy, -s * hx + c * hy, float(command.turn)])


def build_observation(state, command, phase, base_frequency, joint_history, target_history, noise=None, rng=None):
    """
    Assemble the 121-dim proprioceptive observation.

    Args:
        state: SimState
        command: Command
        phase: PhaseState
        base_frequency: f0 in Hz
        joint_history: JointHistory from the actuator
        target_history: (2, 12) foot targets of the two previous control steps
        noise: ObservationNoise or None
        rng: Generator used for the noise draws

    Returns:
        np.ndarray: (121,)
    """
    gravity, angular, linear = base_frame_vectors(state)
    q, qd = state.joint_positions.copy(), state.joint_velocities.copy()
    if noise is not None and rng is not None:
        gravity = gravity + rng.normal(0.0, noise.gravity, 3)
        angular = angular + rng.normal(0.0, noise.angular_velocity, 3)
        linear = linear + rng.normal(0.0, noise.linear_velocity, 3)
        q = q + rng.normal(0.0, noise.joint_position, 12)
        qd = qd + rng.normal(0.0, noise.joint_velocity, 12)

    obs = np.empty(OBS_DIM)
    obs[OBS_COMMAND] = command_features(state, command)
    obs[OBS_GRAVITY] = gravity
    obs[OBS_ANGULAR_VELOCITY] = angular
    obs[OBS_LINEAR_VELOCITY] = linear
    obs[OBS_JOINT_POSITIONS] = q
    obs[OBS_JOINT_VELOCITIES] = qd
    obs[OBS_PHASES] = np.column_stack([np.sin(phase.phases), np.cos(phase.phases)]).reshape(-1)
    obs[OBS_FREQUENCIES] = phase.frequencies
    obs[OBS_BASE_FREQUENCY] = base_frequency
    obs[OBS_ERROR_HISTORY] = joint_history.past_errors()
    obs[OBS_VELOCITY_HISTORY] = joint_history.past_velocities()
    obs[OBS_TARGET_HISTORY] = np.asarray(target_history, dtype=float).reshape(-1)
    return obs


def proprio_vector(observation):
    """h: the observation without f0, joint histories and target history."""
    return np.asarray(observation)[..., :HIST_DIM]


def build_privileged(feet, heightmap, contacts, friction, external_force):
    """
    Assemble the 71-dim privileged state.

    Height scans are expressed relative to each foot's height.
    """
    normals = terrain_normal(heightmap, feet[:, 0], feet[:, 1])
    scans = height_scan(heightmap, feet) - feet[:, 2:3]
    priv = np.empty(PRIV_DIM)
    priv[PRIV_NORMALS] = normals.reshape(-1)
    priv[PRIV_SCANS] = scans.reshape(-1)
    priv[PRIV_FORCES] = np.linalg.norm(contacts.foot_force, axis=1)
    priv[PRIV_FOOT_CONTACT] = contacts.foot_contact
    priv[PRIV_THIGH_CONTACT] = contacts.thigh_contact
    priv[PRIV_SHANK_CONTACT] = contacts.shank_contact
    priv[PRIV_FRICTION] = friction
    priv[PRIV_EXTERNAL_FORCE] = external_force
    return priv


def _tracking(value, target, sharpness):
    return 1.0 if value >= target else math.exp(-sharpness * (value - target) ** 2)


def compute_reward(state, command, target_history, mean_abs_torque, contacts, feet, scans, swing,
                   env_config):
    """
    Reward of one control step.

    Args:
        state: SimState at the end of the step
        command: Command
        target_history: (3, 12) foot targets at t, t-1, t-2
        mean_abs_torque: Sum of |tau| averaged over the physics steps
        contacts: ContactReport accumulated over the step
        feet: (4, 3) world foot positions
        scans: (4, 9) terrain heights around each foot
        swing: (4,) bool swing-phase mask
        env_config: EnvConfig section

    Returns:
        tuple: (total, np.ndarray of the 7 terms in REWARD_TERMS order)
    """
    target = env_config.target_speed
    v = state.base_linear_velocity
    omega_base = state.rotation_matrix().T @ state.base_angular_velocity

    if command.has_heading:
        d = command.direction()
        v_pr = float(v[:2] @ d)
        r_lv = _tracking(v_pr, target, 2.0)
        v_o = float(np.linalg.norm(v[:2] - v_pr * d))
    else:
        r_lv = 0.0
        v_o = float(np.linalg.norm(v))

    if command.is_zero:
        r_av = 0.0
    else:
        r_av = _tracking(float(state.base_angular_velocity[2]) * command.turn, target, 1.5)

    r_b = math.exp(-1.5 * v_o ** 2) + math.exp(-1.5 * float(omega_base[:2] @ omega_base[:2]))

    swing = np.asarray(swing, dtype=bool)
    if swing.any():
        clear = feet[:, 2] > np.max(scans, axis=1) + env_config.clearance_margin
        r_fc = float(np.count_nonzero(clear & swing)) / float(np.count_nonzero(swing))
    else:
        r_fc = 1.0

    r_bc = -float(contacts.body_contact_count)
    history = np.asarray(target_history, dtype=float)
    r_s = -float(np.linalg.norm(history[0] - 2.0 * history[1] + history[2]))
    r_tau = -float(mean_abs_torque)

    terms = np.array([r_lv, r_av, r_b, r_fc, r_bc, r_s, r_tau])
    return float(np.dot(env_config.reward_weights, terms)), terms


def label_transition(state, terminated, command, threshold=0.2):
    """1 when the base moves along the command at >= threshold m/s and the episode goes on."""
    if terminated:
        return 0
    return int(projected_velocity(state, command) >= threshold)


def terminate(state, contacts, heightmap, max_angle_deg=75.0):
    """Base contact, excessive roll or pitch, or the base below the terrain surface."""
    if contacts is not None and contacts.base_contact:
        return True
    roll, pitch, _ = state.roll_pitch_yaw()
    limit = math.radians(max_angle_deg)
    if abs(roll) > limit or abs(pitch) > limit:
        return True
    x, y, z = state.base_position
    return bool(z < height_at(heightmap, x, y))


class ProprioHistory:
    """The last N proprioceptive vectors h, oldest column first, zero-padded."""

    def __init__(self, length, dim=HIST_DIM):
        self.length = int(length)
        self.dim = dim
        self._columns = deque(maxlen=self.length)
        self.reset()

    def reset(self):
        self._columns.clear()
        for _ in range(self.length):
            self._columns.append(np.zeros(self.dim))

    def push(self, h):
        self._columns.append(np.asarray(h, dtype=float).copy())

    def matrix(self):
        return np.stack(self._columns, axis=1)


@dataclass
class Trajectory:
    """One episode."""
    transitions: list = field(default_factory=list)
    log: TrajectoryLog = None
    terrain_type: str = ''
    terrain_values: tuple = ()
    friction: float = 0.0
    command: Command = None
    diverged: bool = False

    def __len__(self):
        return len(self.transitions)

    @property
    def labels(self):
        return np.array([t.label for t in self.transitions], dtype=int)

    @property
    def terminated(self):
        return bool(self.transitions) and self.transitions[-1].terminated

    @property
    def traversability(self):
        if not self.transitions:
            raise EmptyTrajectoryError('Trajectory has no steps')
        return float(self.labels.mean())

    @property
    def total_reward(self):
        return float(sum(t.reward for t in self.transitions))

    @property
    def mean_v_pr(self):
        return float(np.mean([t.v_pr for t in self.transitions])) if self.transitions else 0.0


class ZeroPolicy:
    """Always outputs the zero action: the gait generator alone."""

    def reset(self):
        pass

    def act(self, observation, privileged, history):
        return np.zeros(ACTION_DIM), 0.0


class LocomotionEnv:
    """
    One robot on one terrain at a time.

    Args:
        lab_config: LabConfig
        rng: numpy Generator owning every random draw of this environment
        history_length: Number of h columns kept for students
        friction_range: Uniform friction range for diagnostics, or None for the training distribution
        payload: Extra base mass (kg)
    """

    def __init__(self, lab_config, rng, history_length=1, friction_range=None, payload=0.0):
        self.config = lab_config
        self.rng = rng
        self.nominal_model = RobotModel.from_config(lab_config.robot)
        if payload:
            self.nominal_model = self.nominal_model.with_base_mass(self.nominal_model.base_mass + payload)
        self.params = FtgParams.from_config(lab_config.robot)
        self.scale = ActionScale.from_config(lab_config.robot)
        self.friction_range = friction_range
        self.history = ProprioHistory(history_length)
        self.model = self.nominal_model
        self.sim = None
        self.heightmap = None
        self.motion = None
        self.command = None
        self.randomization = None
        self.target_history = None
        self.steps = 0
        self.observation = None
        self.privileged = None
        self.log = None
        self.diverged = False

    @property
    def control_dt(self):
        return self.config.sim.control_dt

    def _stance_with_noise(self):
        noise = self.rng.uniform(-self.config.env.joint_noise, self.config.env.joint_noise, size=12)
        return self.model.clip_joints(self.model.stance_joints() + noise)

    def _spawn_state(self, heightmap, xy, yaw):
        """Place the robot so that its lowest point is `spawn_clearance` above the terrain under it."""
        q = self._stance_with_noise()
        state = SimState.at_rest(np.array([xy[0], xy[1], 0.0]), q, yaw)
        R = state.rotation_matrix()
        frames = leg_frames(self.model, state.base_position, R, q)
        points, _, _, radius, _ = contact_points(self.model, frames, state.base_position, R)
        ground = float(np.max(height_at(heightmap, points[:, 0], points[:, 1])))
        lowest = float(np.min(points[:, 2] - radius))
        state.base_position[2] = ground - lowest + self.config.env.spawn_clearance
        frames = leg_frames(self.model, state.base_position, R, q)
        points, _, _, radius, _ = contact_points(self.model, frames, state.base_position, R)
        depth, _ = penetration(heightmap, points, radius)
        return state, bool(np.any(depth > 0.0))

    def reset(self, terrain_params, command=None, heightmap=None, disturbance=None, spawn_xy=(0.0, 0.0)):
        """
        Start an episode.

        Args:
            terrain_params: TerrainParams
            command: Command, sampled when omitted
            heightmap: Use this map instead of generating one from terrain_params
            disturbance: DisturbanceSchedule or None
            spawn_xy: Horizontal spawn position

        Returns:
            SimState: the initial state

        Raises:
            SpawnError: If no collision-free start was found
        """
        if heightmap is None:
            heightmap, _ = generate(terrain_params, self.config.terrain)
        self.heightmap = heightmap
        terrain_type = TerrainType(terrain_params.terrain_type)
        self.randomization = apply_randomization(self.config.sim, self.config.terrain, self.rng, terrain_type,
                                                 self.friction_range)
        self.model = self.randomization.apply(self.nominal_model)

        env = self.config.env
        yaw_range = math.pi if env.full_yaw else env.yaw_range
        state = None
        for attempt in range(env.spawn_attempts):
            yaw = self.rng.uniform(-yaw_range, yaw_range)
            state, colliding = self._spawn_state(heightmap, spawn_xy, yaw)
            if not colliding:
                break
            logger.debug('Spawn collision, resampling', extra={'extra_fields': {'attempt': attempt}})
        else:
            raise SpawnError('No collision-free spawn found',
                             payload={'terrain': terrain_type.value, 'attempts': env.spawn_attempts})

        self.command = command if command is not None else sample_command(self.rng, env)
        self.sim = Simulator(self.model, self.config.sim, heightmap, self.randomization.friction, disturbance)
        self.sim.reset(state)
        self.motion = MotionGenerator(self.model, self.params, self.scale,
                                      sample_initial_phases(self.rng, self.config.robot.fixed_trot),
                                      self.config.robot.stand_delay, self.config.robot.disturbance_speed)
        nominal = compose_targets(self.motion.phase, np.zeros(12), self.params, self.model).reshape(-1)
        self.target_history = np.stack([nominal, nominal, nominal])
        self.history.reset()
        self.steps = 0
        self.log = TrajectoryLog()
        self.diverged = False
        self._observe(None)
        return state

    def _observe(self, contacts):
        state = self.sim.state
        contacts = contacts or ContactReport(friction=self.sim.friction)
        noise = self.randomization.noise
        self.observation = build_observation(state, self.command, self.motion.phase,
                                             self.motion.mode.base_frequency(self.params),
                                             self.sim.joint_history(), self.target_history[:2], noise, self.rng)
        feet = self.sim.foot_positions()
        self.privileged = build_privileged(feet, self.heightmap, contacts, self.sim.friction,
                                           self.sim.disturbance.force_at(state.time))

    def proprio_history(self):
        """(48, N) history of the previous N steps' h vectors."""
        return self.history.matrix()

    def joint_targets(self, foot_targets):
        """Horizontal-frame foot targets -> clipped joint targets."""
        state = self.sim.state
        pose = (state.base_position, state.rotation_matrix())
        q = self.sim.targets.copy()
        for leg in LEGS:
            frame = horizontal_frame(pose, leg, self.model)
            target = horizontal_to_hip(foot_targets[leg], frame, pose, leg, self.model)
            target = clamp_to_workspace(target, leg, self.model, self.config.robot.reach_clamp)
            try:
                q[3 * leg:3 * leg + 3] = inverse_kinematics(target, leg, self.model)
            except WorkspaceError:
                logger.debug('Foot target unreachable, holding previous joint targets',
                             extra={'extra_fields': {'leg': leg.name}})
        return self.model.clip_joints(q)

    def step(self, action):
        """
        Apply one 16-dim action for one control period.

        Returns:
            Transition
        """
        action = np.asarray(action, dtype=float)
        obs, priv = self.observation, self.privileged
        state = self.sim.state
        speed = float(np.linalg.norm(state.base_linear_velocity[:2]))

        terminated, diverged = False, False
        summary = None
        try:
            foot_targets = self.motion.step(action, self.command, speed, self.control_dt)
            q_targets = self.joint_targets(foot_targets)
            summary = self.sim.control_step(q_targets)
        except SimulationError as exc:
            logger.warning('Simulation diverged', extra={'extra_fields': exc.to_dict()})
            terminated, diverged = True, True
            self.diverged = True
            foot_targets = self.target_history[0].reshape(4, 3)
        except GimbalError:
            terminated = True
            foot_targets = self.target_history[0].reshape(4, 3)

        self.target_history = np.stack([foot_targets.reshape(-1), self.target_history[0], self.target_history[1]])
        self.steps += 1
        state = self.sim.state
        env = self.config.env

        if summary is not None:
            contacts = summary.contacts
            feet = self.sim.foot_positions()
            scans = height_scan(self.heightmap, feet)
            reward, terms = compute_reward(state, self.command, self.target_history, summary.mean_abs_torque,
                                           contacts, feet, scans, self.motion.phase.swing, env)
            terminated = terminated or terminate(state, contacts, self.heightmap, env.termination_angle_deg)
            self._log(state, summary)
        else:
            contacts = None
            reward, terms = 0.0, np.zeros(len(REWARD_TERMS))

        if not diverged:
            try:
                self._observe(summary.last_contacts if summary is not None else None)
            except GimbalError:
                # base x vertical: no heading frame, keep the last observation
                terminated = True
        v_pr = projected_velocity(state, self.command) if not diverged else 0.0
        label = label_transition(state, terminated, self.command, env.label_threshold) if not diverged else 0
        done = terminated or self.steps >= env.max_episode_length

        self.history.push(proprio_vector(obs))
        return Transition(
            observation=obs, privileged=priv, action=action, reward=reward, reward_terms=terms,
            next_observation=self.observation, next_privileged=self.privileged, done=done,
            terminated=terminated, label=label, v_pr=v_pr,
        )

    def _log(self, state, summary):
        log = self.log
        log.time.append(state.time)
        log.base_position.append(state.base_position.copy())
        log.base_orientation.append(state.base_orientation.copy())
        log.base_linear_velocity.append(state.base_linear_velocity.copy())
        log.base_angular_velocity.append(state.base_angular_velocity.copy())
        log.joint_positions.append(state.joint_positions.copy())
        log.joint_velocities.append(state.joint_velocities.copy())
        log.torques.append(summary.torques)
        log.positive_power.append(summary.positive_work / self.control_dt)
        log.foot_contact.append(summary.contacts.foot_contact.copy())
        log.body_contacts.append(summary.contacts.body_contact_count)
        log.foot_positions.append(self.sim.foot_positions().copy())


def rollout(policy, env, terrain_params, steps, command=None, heightmap=None, disturbance=None,
            spawn_xy=(0.0, 0.0)):
    """
    Run `policy` for up to `steps` control steps.

    The policy exposes `reset()` and `act(observation, privileged, history) -> (action, log_prob)`.

    Returns:
        Trajectory: stops at termination or after `steps`
    """
    steps = min(int(steps), env.config.env.max_episode_length)
    env.reset(terrain_params, command=command, heightmap=heightmap, disturbance=disturbance, spawn_xy=spawn_xy)
    policy.reset()
    trajectory = Trajectory(terrain_type=TerrainType(terrain_params.terrain_type).value,
                            terrain_values=tuple(terrain_params.values), friction=env.sim.friction,
                            command=env.command)
    for _ in range(steps):
        action, log_prob = policy.act(env.observation, env.privileged, env.proprio_history())
        transition = env.step(action)
        transition.log_prob = float(log_prob)
        trajectory.transitions.append(transition)
        if transition.terminated:
            trajectory.diverged = env.diverged
            break
    if trajectory.transitions and not trajectory.transitions[-1].done:
        trajectory.transitions[-1].done = True
    trajectory.log = env.log
    return trajectory
