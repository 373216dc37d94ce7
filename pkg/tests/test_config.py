from __future__ import annotations

from pathlib import Path

import pytest
from dotenv import load_dotenv

from app import create_lab
from config import LabConfig, get_profile, load_config
from utils.errors import ConfigError

CONFIG_DIR = Path(__file__).resolve().parents[1] / 'configs'


def test_reference_config_loads():
    cfg = load_config(CONFIG_DIR / 'reference.toml')
    assert isinstance(cfg, LabConfig)
    assert cfg.student.tcn_channels[20] == 44
    assert all(isinstance(k, int) for k in cfg.student.tcn_channels)


@pytest.mark.parametrize('name', ['reference', 'hills', 'step', 'slope', 'flat', 'lateral_force'])
def test_shipped_configs_are_valid(name):
    assert isinstance(load_config(CONFIG_DIR / f'{name}.toml'), LabConfig)


def test_missing_file_names_the_flag(tmp_path):
    with pytest.raises(ConfigError) as info:
        load_config(tmp_path / 'absent.toml')
    assert info.value.payload['flag'] == '--config'


def test_invalid_toml(tmp_path):
    path = tmp_path / 'broken.toml'
    path.write_text('[train\nbatch_size = ')
    with pytest.raises(ConfigError):
        load_config(path)


def test_unknown_key_is_rejected(tmp_path):
    path = tmp_path / 'typo.toml'
    path.write_text('[train]\nbatchsize = 10\n')
    with pytest.raises(ConfigError) as info:
        load_config(path)
    assert info.value.payload['errors']


def test_out_of_range_value_is_rejected(tmp_path):
    path = tmp_path / 'bad.toml'
    path.write_text('[curriculum]\np_transition = 1.5\n')
    with pytest.raises(ConfigError):
        load_config(path)


def test_profile_defaults_then_file_then_overrides(tmp_path):
    path = tmp_path / 'small.toml'
    path.write_text('[train]\niterations = 7\n')
    cfg = load_config(path, profile='test', overrides={'eval': {'trials': 5}})
    assert cfg.train.batch_size == 200
    assert cfg.train.iterations == 7
    assert cfg.eval.trials == 5
    assert cfg.env.max_episode_length == 50


def test_paper_profile_scales_up():
    cfg = load_config(profile='paper')
    assert cfg.train.batch_size == 80000
    assert cfg.student.iterations == 4000


def test_unknown_profile():
    with pytest.raises(ConfigError):
        get_profile('huge')


def test_replace_returns_a_new_config():
    cfg = LabConfig()
    changed = cfg.replace(sim={'randomize': False})
    assert cfg.sim.randomize and not changed.sim.randomize
    assert changed.train == cfg.train


def test_thread_count_is_read_when_asked(monkeypatch):
    monkeypatch.delenv('BLINDGAIT_THREADS', raising=False)
    assert get_profile('test').workers() == 1
    monkeypatch.setenv('BLINDGAIT_THREADS', '3')
    assert get_profile('test').workers() == 3
    assert get_profile('desk').workers() == 3


@pytest.mark.parametrize('value', ['0', '-2', 'many'])
def test_bad_thread_count(monkeypatch, value):
    monkeypatch.setenv('BLINDGAIT_THREADS', value)
    with pytest.raises(ConfigError):
        get_profile('desk').workers()


def test_dotenv_settings_reach_the_lab(tmp_path, monkeypatch):
    for name in ('BLINDGAIT_THREADS', 'BLINDGAIT_LOG_LEVEL'):
        # recorded first so teardown removes whatever the .env file sets
        monkeypatch.setenv(name, '')
        monkeypatch.delenv(name)
    env_file = tmp_path / '.env'
    env_file.write_text('BLINDGAIT_THREADS=4\nBLINDGAIT_LOG_LEVEL=DEBUG\n')
    load_dotenv(env_file)
    lab = create_lab(profile='test', out_dir=tmp_path / 'out', configure_logging=False)
    assert lab.workers == 4
    assert get_profile('test').log_level() == 'DEBUG'
