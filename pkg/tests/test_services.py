from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
import torch

from app import create_lab
from environment import LocomotionEnv, rollout
from models import Command
from networks import StudentActor, TcnStudent, TeacherPolicy, copy_shared_layers, teacher_forward
from services.rollout_service import EpisodeJob, RolloutContext, RolloutService
from services.student_service import StudentService
from services.teacher_service import TeacherService
from terrain import TerrainParams, TerrainType

CONFIG_DIR = Path(__file__).resolve().parents[1] / 'configs'
FLAT = TerrainParams(TerrainType.FLAT, (), seed=0)


def _lab(tmp_path, name='flat', seed=0):
    return create_lab(CONFIG_DIR / f'{name}.toml', 'test', seed, tmp_path, configure_logging=False)


@pytest.mark.parametrize('batch, length, expected', [(8000, 400, 20), (200, 50, 4), (201, 50, 5), (10, 50, 1)])
def test_episodes_per_iteration(batch, length, expected):
    assert TeacherService.episodes_per_iteration(batch, length) == expected


def test_single_worker_runs_inline():
    with RolloutService.pool(1) as pool:
        assert pool is None


def test_inline_collection_is_reproducible(tmp_path):
    lab = _lab(tmp_path)
    context = RolloutContext(lab.config)
    jobs = [EpisodeJob(FLAT, 5, 'zero', command=Command.toward(0.0), tag=i) for i in range(3)]
    first = RolloutService.collect(None, context, jobs, np.random.SeedSequence(11))
    second = RolloutService.collect(None, context, jobs, np.random.SeedSequence(11))
    assert [r.tag for r in first] == [0, 1, 2]
    assert [r.trajectory.total_reward for r in first] == [r.trajectory.total_reward for r in second]


@pytest.mark.slow
def test_pool_matches_inline_collection(tmp_path):
    lab = _lab(tmp_path)
    context = RolloutContext(lab.config)
    jobs = [EpisodeJob(FLAT, 10, 'zero', command=Command.toward(0.0), tag=i) for i in range(4)]
    inline = RolloutService.collect(None, context, jobs, np.random.SeedSequence(5))
    with RolloutService.pool(2) as pool:
        pooled = RolloutService.collect(pool, context, jobs, np.random.SeedSequence(5))
    assert [r.tag for r in pooled] == [0, 1, 2, 3]
    assert [r.trajectory.total_reward for r in pooled] == [r.trajectory.total_reward for r in inline]


@pytest.mark.slow
def test_teacher_training_is_deterministic(tmp_path):
    outputs = []
    for run in ('a', 'b'):
        result = TeacherService.train(_lab(tmp_path / run, seed=3))
        assert result['success']
        outputs.append(Path(result['metrics']).read_bytes())
    assert outputs[0] == outputs[1]


def test_dagger_labels_the_states_the_student_visited(quiet_config):
    teacher = TeacherPolicy().to(torch.float64)
    student = copy_shared_layers(teacher, TcnStudent(3, 8).to(torch.float64))
    env = LocomotionEnv(quiet_config, np.random.default_rng(8), history_length=3)
    trajectories = [rollout(StudentActor(student), env, FLAT, 6, command=Command.toward(angle))
                    for angle in (0.0, 1.0)]

    dataset = StudentService.aggregate(teacher, trajectories, torch.float64)
    data = dataset.tensors()
    assert dataset.episode_lengths == [len(t) for t in trajectories]
    visited = np.concatenate([[t.observation for t in traj.transitions] for traj in trajectories])
    assert np.array_equal(data['observations'].numpy(), visited)

    # every logged action is the student's own choice on its own history
    logged = np.concatenate([[t.action for t in traj.transitions] for traj in trajectories])
    with torch.no_grad():
        _, replayed = student(data['observations'], dataset.histories(np.arange(len(dataset)), 3))
    assert np.allclose(replayed.numpy(), logged, rtol=0.0, atol=1e-12)

    # labels are the teacher's outputs on the stored privileged states
    with torch.no_grad():
        latents, actions, _ = teacher_forward(data['observations'], data['privileged'], teacher)
    assert torch.allclose(data['latents'], latents, rtol=0.0, atol=1e-12)
    assert torch.allclose(data['actions'], actions, rtol=0.0, atol=1e-12)
    assert not torch.allclose(data['actions'], replayed)
