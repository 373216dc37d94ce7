"""
Experiment configuration.

Defaults live in typed pydantic sections; profiles (desk, paper, test) override
a handful of sizes, and a TOML file given on the command line overrides both.
"""
import copy
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Literal

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError as PydanticValidationError, model_validator

from utils.errors import ConfigError

# Load environment variables from .env file
load_dotenv()


class Section(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)


class RobotConfig(Section):
    """Leg geometry, masses and gait generator settings."""
    hip_offset_x: float = Field(0.3, gt=0)
    hip_offset_y: float = Field(0.1, gt=0)
    abduction_offset: float = Field(0.10, ge=0)
    thigh_length: float = Field(0.25, gt=0)
    shank_length: float = Field(0.25, gt=0)
    nominal_reach: float = Field(0.42, gt=0)
    base_mass: float = Field(25.0, gt=0)
    base_size: tuple[float, float, float] = (0.6, 0.3, 0.15)
    link_masses: tuple[float, float, float] = (1.0, 1.0, 1.0)
    link_radius: float = Field(0.03, ge=0)
    torque_limit: float = Field(40.0, gt=0)
    haa_limits: tuple[float, float] = (-0.72, 0.72)
    hfe_limits: tuple[float, float] = (-2.0, 2.0)
    kfe_limits: tuple[float, float] = (-2.8, 0.0)
    gravity: float = Field(9.81, gt=0)
    # gait generator
    foot_height: float = Field(0.2, gt=0)
    base_frequency: float = Field(1.25, ge=0)
    frequency_scale: float = Field(0.5, ge=0)
    residual_xy: float = Field(0.15, ge=0)
    residual_z: float = Field(0.10, ge=0)
    reach_clamp: float = Field(0.98, gt=0, le=1.0)
    fixed_trot: bool = False
    stand_delay: float = Field(0.5, ge=0)
    disturbance_speed: float = Field(0.3, ge=0)

    @model_validator(mode='after')
    def _check_reach(self):
        if self.nominal_reach >= self.thigh_length + self.shank_length:
            raise ValueError('nominal_reach must be shorter than thigh_length + shank_length')
        return self


class TerrainConfig(Section):
    """Terrain grid and friction distributions."""
    extent: float = Field(10.0, ge=8.0)
    hills_spacing: float = Field(0.2, gt=0)
    block_spacing: float = Field(0.02, gt=0)
    stairs_flat_length: float = Field(1.0, gt=0)
    friction_mean: float = 0.7
    friction_std: float = Field(0.2, ge=0)
    slippery_friction_mean: float = 0.3
    slippery_friction_std: float = Field(0.1, ge=0)
    friction_min: float = Field(0.1, gt=0)
    # `terrain gen` and `rollout` defaults; empty values pick the middle of the grid
    kind: Literal['flat', 'hills', 'slippery_hills', 'steps', 'stairs'] = 'hills'
    values: tuple[float, ...] = ()


class SimConfig(Section):
    """Physics, actuator, contact and randomization settings."""
    physics_dt: float = Field(0.001, gt=0)
    pd_rate: float = Field(400.0, gt=0)
    control_dt: float = Field(0.02, gt=0)
    history_dt: float = Field(0.01, gt=0)
    kp: float = Field(50.0, ge=0)
    kd: float = Field(0.4, ge=0)
    contact_stiffness: float = Field(5.0e4, gt=0)
    contact_damping: float = Field(500.0, ge=0)
    stiction_velocity: float = Field(0.01, gt=0)
    divergence_limit: float = Field(1.0e6, gt=0)
    randomize: bool = True
    mass_scaling: float = Field(0.0, ge=0, lt=1)
    observation_noise: bool = True
    noise_joint_position: float = Field(0.01, ge=0)
    noise_joint_velocity: float = Field(0.2, ge=0)
    noise_linear_velocity: float = Field(0.05, ge=0)
    noise_angular_velocity: float = Field(0.05, ge=0)
    noise_gravity: float = Field(0.01, ge=0)


class EnvConfig(Section):
    """Episode, command and reward settings."""
    max_episode_length: int = Field(400, ge=1)
    spawn_clearance: float = Field(0.03, ge=0)
    spawn_attempts: int = Field(10, ge=1)
    joint_noise: float = Field(0.2, ge=0)
    yaw_range: float = Field(0.5235987755982988, ge=0)
    full_yaw: bool = False
    stop_probability: float = Field(0.05, ge=0, le=1)
    turn_probabilities: tuple[float, float, float] = (0.2, 0.6, 0.2)
    termination_angle_deg: float = Field(75.0, gt=0)
    label_threshold: float = 0.2
    clearance_margin: float = Field(0.02, ge=0)
    target_speed: float = Field(0.6, gt=0)
    reward_weights: tuple[float, float, float, float, float, float, float] = (
        0.05, 0.05, 0.04, 0.01, 0.02, 0.025, 2.0e-5)


class TrpoConfig(Section):
    """Teacher training (TRPO) hyperparameters."""
    discount: float = Field(0.995, gt=0, le=1)
    gae_lambda: float = Field(0.95, ge=0, le=1)
    kl_threshold: float = Field(0.01, gt=0, lt=1)
    kl_slack: float = Field(1.5, ge=1)
    cg_damping: float = Field(0.1, gt=0)
    cg_iterations: int = Field(50, ge=1)
    cg_tolerance: float = Field(1.0e-10, gt=0)
    line_search_steps: int = Field(10, ge=1)
    batch_size: int = Field(8000, ge=1)
    iterations: int = Field(300, ge=1)
    value_epochs: int = Field(3, ge=1)
    value_minibatches: int = Field(4, ge=1)
    value_learning_rate: float = Field(1.0e-3, gt=0)
    dtype: Literal['float64', 'float32'] = 'float64'


class DistillConfig(Section):
    """Student distillation hyperparameters."""
    arch: Literal['tcn', 'gru'] = 'tcn'
    history_length: int = Field(20, ge=1)
    tcn_channels: dict[int, int] = Field(default_factory=lambda: {1: 60, 20: 44, 100: 34})
    tcn_learning_rate: float = Field(5.0e-4, gt=0)
    gru_learning_rate: float = Field(2.0e-4, gt=0)
    lr_decay: float = Field(0.995, gt=0, lt=1)
    decay_interval: int = Field(100, ge=1)
    batch_size: int = Field(2000, ge=1)
    minibatches: int = Field(5, ge=1)
    epochs: int = Field(4, ge=1)
    iterations: int = Field(200, ge=1)
    bptt_length: int = Field(100, ge=1)
    latent_loss: bool = True
    use_curriculum: bool = True

    @property
    def learning_rate(self):
        return self.tcn_learning_rate if self.arch == 'tcn' else self.gru_learning_rate

    def channels_for(self, history_length):
        """Channel width for a TCN over `history_length` columns (nearest published variant)."""
        known = sorted(self.tcn_channels)
        nearest = min(known, key=lambda n: (abs(n - history_length), n))
        return self.tcn_channels[nearest]


class DecoderTrainConfig(Section):
    """Decoder training hyperparameters."""
    learning_rate: float = Field(1.0e-4, gt=0)
    lr_decay: float = Field(0.99, gt=0, lt=1)
    decay_interval: int = Field(100, ge=1)
    batch_size: int = Field(2000, ge=1)
    minibatches: int = Field(2, ge=1)
    epochs: int = Field(10, ge=1)
    iterations: int = Field(100, ge=1)
    weight_decay: float = Field(1.0e-4, ge=0)


class CurriculumConfig(Section):
    """Adaptive terrain curriculum hyperparameters."""
    enabled: bool = True
    terrain_types: tuple[str, ...] = ('hills', 'slippery_hills', 'steps', 'stairs')
    n_particle: int = Field(10, ge=1)
    p_transition: float = Field(0.8, ge=0, le=1)
    n_traj: int = Field(6, ge=1)
    n_evaluate: int = Field(10, ge=1)
    p_replay: float = Field(0.05, ge=0, le=1)
    band: tuple[float, float] = (0.5, 0.9)
    levels: int = Field(10, ge=2)
    init: Literal['easiest', 'uniform'] = 'easiest'


class EvalConfig(Section):
    """Diagnostic scenario settings."""
    scenario: Literal['flat', 'step', 'slope', 'lateral-force', 'payload'] = 'flat'
    trials: int = Field(100, ge=1)
    duration: float = Field(10.0, gt=0)
    step_height: float = Field(0.1, ge=0)
    step_distance: float = Field(1.0, gt=0)
    slope_deg: float = Field(20.0, ge=0, lt=90)
    force: float = 50.0
    force_start: float = Field(2.0, ge=0)
    force_duration: float = Field(5.0, ge=0)
    payload_kg: float = Field(0.0, ge=0)
    payload_default_kg: float = Field(10.0, ge=0)
    directions: int = Field(8, ge=1)
    friction_range: tuple[float, float] = (0.4, 1.0)
    desirability_trials: int = Field(3, ge=1)
    desirability_terrain: Literal['hills', 'slippery_hills'] = 'hills'


class LabConfig(Section):
    """Complete experiment configuration."""
    robot: RobotConfig = RobotConfig()
    terrain: TerrainConfig = TerrainConfig()
    sim: SimConfig = SimConfig()
    env: EnvConfig = EnvConfig()
    train: TrpoConfig = TrpoConfig()
    student: DistillConfig = DistillConfig()
    decoder: DecoderTrainConfig = DecoderTrainConfig()
    curriculum: CurriculumConfig = CurriculumConfig()
    eval: EvalConfig = EvalConfig()

    def replace(self, **sections):
        """Return a copy with some fields of some sections replaced.

        Example: ``cfg.replace(sim={'randomize': False})``.
        """
        data = self.model_dump()
        return LabConfig.model_validate(_deep_merge(data, sections))


class Config:
    """Base profile. Environment settings are read when a lab is created."""
    NAME = 'desk'
    DEFAULT_WORKERS = None  # one per CPU
    OVERRIDES = {}

    @classmethod
    def defaults(cls):
        return copy.deepcopy(cls.OVERRIDES)

    @classmethod
    def workers(cls):
        """Rollout workers: BLINDGAIT_THREADS, else the profile default."""
        threads = os.environ.get('BLINDGAIT_THREADS', '').strip()
        if threads:
            try:
                workers = int(threads)
            except ValueError:
                workers = 0
            if workers < 1:
                raise ConfigError('BLINDGAIT_THREADS must be a positive integer', payload={'value': threads})
            return workers
        return cls.DEFAULT_WORKERS or os.cpu_count() or 1

    @classmethod
    def log_level(cls):
        return os.environ.get('BLINDGAIT_LOG_LEVEL', 'INFO')

    @classmethod
    def log_file(cls):
        return os.environ.get('BLINDGAIT_LOG_FILE') or None


class DeskConfig(Config):
    """Desk-scale runs on one workstation."""
    NAME = 'desk'


class PaperConfig(Config):
    """Published training scale."""
    NAME = 'paper'
    OVERRIDES = {
        'train': {'batch_size': 80000, 'iterations': 10000},
        'student': {'batch_size': 20000, 'iterations': 4000},
        'decoder': {'batch_size': 20000, 'iterations': 1000},
    }


class TestConfig(Config):
    """Tiny sizes for the test-suite."""
    NAME = 'test'
    DEFAULT_WORKERS = 1
    OVERRIDES = {
        'train': {'batch_size': 200, 'iterations': 2},
        'student': {'batch_size': 100, 'iterations': 2, 'epochs': 1},
        'decoder': {'batch_size': 100, 'iterations': 2, 'epochs': 1},
        'eval': {'trials': 2, 'duration': 1.0},
        'env': {'max_episode_length': 50},
    }


config = {
    'desk': DeskConfig,
    'paper': PaperConfig,
    'test': TestConfig,
    'default': DeskConfig,
}


def _deep_merge(base, override):
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def get_profile(name=None):
    """Return the profile class for `name` (env BLINDGAIT_PROFILE, else default)."""
    name = name or os.environ.get('BLINDGAIT_PROFILE') or 'default'
    if name not in config:
        raise ConfigError(f"Unknown profile '{name}'", payload={'profiles': sorted(config)})
    return config[name]


def load_config(path=None, profile=None, overrides=None):
    """
    Build a LabConfig from profile defaults, an optional TOML file and overrides.

    Args:
        path: TOML file with [robot], [terrain], [sim], [env], [train], [student],
            [decoder], [curriculum] and [eval] tables (all optional)
        profile: Profile name from `config`
        overrides: Nested dict applied last

    Returns:
        LabConfig

    Raises:
        ConfigError: If the file is missing, unparsable or holds invalid values
    """
    data = get_profile(profile).defaults()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"Config file not found: {path}", payload={'flag': '--config'})
        try:
            with open(path, 'rb') as f:
                data = _deep_merge(data, tomllib.load(f))
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"Config file {path} is not valid TOML: {e}", payload={'flag': '--config'})
    if overrides:
        data = _deep_merge(data, overrides)
    if 'student' in data and 'tcn_channels' in data['student']:
        data['student']['tcn_channels'] = {int(k): v for k, v in data['student']['tcn_channels'].items()}
    try:
        return LabConfig.model_validate(data)
    except PydanticValidationError as e:
        errors = [
            {'field': '.'.join(str(p) for p in err['loc']), 'message': err['msg']}
            for err in e.errors()
        ]
        raise ConfigError('Invalid configuration', payload={'errors': errors})
