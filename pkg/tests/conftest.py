from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
import torch

from config import LabConfig, RobotConfig, SimConfig, TerrainConfig
from kinematics import RobotModel

REPO_ROOT = Path(__file__).resolve().parents[1]
CONFIG_DIR = REPO_ROOT / 'configs'


@pytest.fixture
def robot_model() -> RobotModel:
    return RobotModel.from_config(RobotConfig())


@pytest.fixture
def lab_config() -> LabConfig:
    return LabConfig()


@pytest.fixture
def quiet_config() -> LabConfig:
    """No randomization, short episodes, nominal friction."""
    return LabConfig().replace(sim={'randomize': False}, env={'max_episode_length': 50})


@pytest.fixture
def sim_config() -> SimConfig:
    return SimConfig(randomize=False)


@pytest.fixture
def terrain_config() -> TerrainConfig:
    return TerrainConfig()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
