from __future__ import annotations

from types import SimpleNamespace

import numpy as np
import pytest
import torch

from config import DistillConfig, TrpoConfig
from environment import HIST_DIM, OBS_DIM, PRIV_DIM, LocomotionEnv
from models import Command
from networks import (
    DiagGaussian,
    GruStudent,
    TcnStudent,
    TeacherPolicy,
    ValueBaseline,
    flat_parameters,
    teacher_forward,
)
from terrain import TerrainParams, TerrainType
from training import (
    DistillDataset,
    bptt_windows,
    conjugate_gradient,
    decay_schedule,
    distill_epoch,
    distill_loss,
    episode_starts,
    estimate_advantages,
    fit_value,
    gather_histories,
    learning_rate_at,
    stream_inputs,
    trpo_update,
    truncated_bptt_epoch,
)
from utils.errors import EmptyTrajectoryError, OptimizationError

DTYPE = torch.float64
FLAT = TerrainParams(TerrainType.FLAT, (), seed=0)


def _batch(n=32, seed=0):
    g = torch.Generator().manual_seed(seed)
    return (torch.randn(n, OBS_DIM, generator=g, dtype=DTYPE),
            torch.randn(n, PRIV_DIM, generator=g, dtype=DTYPE),
            torch.randn(n, 16, generator=g, dtype=DTYPE))


def test_lambda_one_with_zero_values_gives_discounted_returns():
    rewards = np.array([1.0, 2.0, 3.0])
    zeros = np.zeros(3)
    done = np.array([False, False, True])
    adv, returns = estimate_advantages(rewards, zeros, zeros, done, done, gamma=0.5, lam=1.0, normalize=False)
    assert np.allclose(adv, [1.0 + 0.5 * 2.0 + 0.25 * 3.0, 2.0 + 0.5 * 3.0, 3.0])
    assert np.array_equal(adv, returns)


def test_constant_reward_return_over_a_full_episode():
    n = 400
    done = np.zeros(n, dtype=bool)
    done[-1] = True
    _, returns = estimate_advantages(np.ones(n), np.zeros(n), np.zeros(n), done, np.zeros(n, dtype=bool),
                                     gamma=0.995, lam=1.0, normalize=False)
    assert returns[0] == pytest.approx((1 - 0.995 ** 400) / 0.005, rel=1e-12)


def test_time_limit_bootstraps_but_termination_does_not():
    kwargs = dict(gamma=0.9, lam=0.95, normalize=False)
    done = np.array([True])
    limit, _ = estimate_advantages([1.0], [0.0], [10.0], done, [False], **kwargs)
    fallen, _ = estimate_advantages([1.0], [0.0], [10.0], done, [True], **kwargs)
    assert limit[0] == pytest.approx(1.0 + 0.9 * 10.0)
    assert fallen[0] == 1.0


def test_advantages_do_not_leak_across_episodes():
    done = np.array([True, False, True])
    adv, _ = estimate_advantages([0.0, 5.0, 5.0], np.zeros(3), np.zeros(3), done, done, normalize=False)
    assert adv[0] == 0.0


def test_normalized_advantages():
    rng = np.random.default_rng(0)
    done = np.zeros(50, dtype=bool)
    done[-1] = True
    adv, _ = estimate_advantages(rng.normal(size=50), rng.normal(size=50), rng.normal(size=50), done, done)
    assert abs(adv.mean()) < 1e-12
    assert adv.std() == pytest.approx(1.0)


def test_conjugate_gradient_solves_spd_system():
    g = torch.Generator().manual_seed(1)
    M = torch.randn(8, 8, generator=g, dtype=DTYPE)
    A = M @ M.T + 8 * torch.eye(8, dtype=DTYPE)
    b = torch.randn(8, generator=g, dtype=DTYPE)
    x = conjugate_gradient(lambda v: A @ v, b, iterations=50, tolerance=1e-20)
    assert torch.allclose(x, torch.linalg.solve(A, b), atol=1e-8)


def test_conjugate_gradient_rejects_negative_curvature():
    with pytest.raises(OptimizationError):
        conjugate_gradient(lambda v: -v, torch.ones(4, dtype=DTYPE))


def test_zero_advantages_leave_the_policy_unchanged():
    policy = TeacherPolicy().to(DTYPE)
    before = flat_parameters(policy)
    o, x, actions = _batch()
    stats = trpo_update(policy, o, x, None, actions, torch.zeros(32, dtype=DTYPE), TrpoConfig())
    assert not stats['accepted']
    assert stats['reason'] == 'zero-gradient'
    assert torch.equal(flat_parameters(policy), before)


def test_rejected_line_search_restores_parameters_exactly():
    policy = TeacherPolicy().to(DTYPE)
    before = flat_parameters(policy)
    o, x, actions = _batch()
    config = SimpleNamespace(**TrpoConfig().model_dump())
    config.kl_slack = 0.0
    stats = trpo_update(policy, o, x, None, actions, torch.randn(32, dtype=DTYPE), config)
    assert stats['reason'] == 'line-search'
    assert torch.equal(flat_parameters(policy), before)


def test_accepted_step_respects_the_trust_region():
    policy = TeacherPolicy().to(DTYPE)
    before = flat_parameters(policy)
    o, x, actions = _batch(seed=4)
    config = TrpoConfig()
    advantages = torch.randn(32, generator=torch.Generator().manual_seed(4), dtype=DTYPE)
    stats = trpo_update(policy, o, x, None, actions, advantages, config)
    assert stats['accepted']
    assert 0.0 <= stats['kl'] <= config.kl_slack * config.kl_threshold
    assert stats['improvement'] >= 0.0
    assert not torch.equal(flat_parameters(policy), before)


class _BanditPolicy(torch.nn.Module):
    """State-free 2-D Gaussian."""

    def __init__(self):
        super().__init__()
        self.mean = torch.nn.Parameter(torch.zeros(2, dtype=DTYPE))
        self.log_std = torch.nn.Parameter(torch.zeros(2, dtype=DTYPE))

    def distribution(self, observations, privileged, histories):
        n = observations.shape[0]
        return DiagGaussian(self.mean.expand(n, 2), torch.exp(self.log_std).expand(n, 2))

    def expected_reward(self, target):
        with torch.no_grad():
            return -float(((self.mean - target) ** 2).sum() + torch.exp(2.0 * self.log_std).sum())


def test_trust_region_steps_improve_a_gaussian_bandit():
    policy = _BanditPolicy()
    target = torch.tensor([5.0, -5.0], dtype=DTYPE)
    rng = np.random.default_rng(0)
    n = 4000
    observations = torch.zeros(n, 1, dtype=DTYPE)
    rewards = [policy.expected_reward(target)]
    for _ in range(20):
        with torch.no_grad():
            dist = policy.distribution(observations, None, None)
            actions = dist.mean + dist.std * torch.as_tensor(rng.standard_normal((n, 2)))
        r = -((actions - target) ** 2).sum(-1)
        advantages = (r - r.mean()) / r.std()
        stats = trpo_update(policy, observations, None, None, actions, advantages, TrpoConfig())
        assert stats['accepted']
        rewards.append(policy.expected_reward(target))
    assert np.all(np.diff(rewards) > 0.0)


def test_value_fit_reduces_error():
    value = ValueBaseline().to(DTYPE)
    o, x, _ = _batch(n=64)
    returns = torch.linspace(-1.0, 1.0, 64, dtype=DTYPE)
    optimizer = torch.optim.Adam(value.parameters(), lr=1e-3)
    rng = np.random.default_rng(0)
    first = fit_value(value, optimizer, o, x, returns, 1, 4, rng)
    last = fit_value(value, optimizer, o, x, returns, 30, 4, rng)
    assert last < first


def test_learning_rate_schedule():
    assert learning_rate_at(5e-4, 0.995, 100, 0) == 5e-4
    assert learning_rate_at(5e-4, 0.995, 100, 100) == pytest.approx(5e-4 * 0.995)
    model = torch.nn.Linear(2, 2)
    optimizer = torch.optim.Adam(model.parameters(), lr=5e-4)
    scheduler = decay_schedule(optimizer, 0.995, 100)
    for _ in range(200):
        optimizer.step()
        scheduler.step()
    assert optimizer.param_groups[0]['lr'] == pytest.approx(5e-4 * 0.995 ** 2)


def test_episode_starts():
    assert episode_starts([False, True, False, False, True]).tolist() == [0, 0, 2, 2, 2]


def test_histories_are_zero_before_the_episode_start():
    observations = torch.arange(5 * OBS_DIM, dtype=DTYPE).reshape(5, OBS_DIM) + 1.0
    starts = episode_starts([False, True, False, False, True])
    H = gather_histories(observations, starts, np.arange(5), 3)
    assert H.shape == (5, HIST_DIM, 3)
    assert torch.all(H[0] == 0)
    assert torch.all(H[2] == 0)
    # newest column of step 4 is h at step 3, the one before is step 2, then the episode start
    assert torch.equal(H[4, :, 2], observations[3, :HIST_DIM])
    assert torch.equal(H[4, :, 1], observations[2, :HIST_DIM])
    assert torch.all(H[4, :, 0] == 0)


def test_gathered_histories_match_the_rollout_history(quiet_config):
    env = LocomotionEnv(quiet_config, np.random.default_rng(5), history_length=4)
    env.reset(FLAT, command=Command.toward(0.0))
    observations, seen = [], []
    for _ in range(7):
        observations.append(env.observation.copy())
        seen.append(env.proprio_history().copy())
        env.step(np.zeros(16))
    observations = torch.as_tensor(np.stack(observations))
    H = gather_histories(observations, np.zeros(7, dtype=int), np.arange(7), 4)
    for i in range(7):
        assert torch.equal(H[i], torch.as_tensor(seen[i]))
        if i:
            # newest column is exactly h of the previous observation
            assert torch.equal(H[i, :, -1], observations[i - 1, :HIST_DIM])


def _dataset(episodes=(12, 8), seed=0):
    teacher = TeacherPolicy().to(DTYPE)
    rng = np.random.default_rng(seed)
    dataset = DistillDataset()
    for n in episodes:
        o = rng.normal(size=(n, OBS_DIM))
        x = rng.normal(size=(n, PRIV_DIM))
        with torch.no_grad():
            latent, mean, _ = teacher(torch.as_tensor(o), torch.as_tensor(x))
        dataset.add_episode(o, x, latent.numpy(), mean.numpy())
    return dataset


def test_dataset_keeps_episodes_apart():
    dataset = _dataset()
    assert len(dataset) == 20
    assert dataset.episodes() == [(0, 12), (12, 20)]
    H = dataset.histories(np.array([12, 13]), 4)
    assert torch.all(H[0] == 0)
    assert torch.equal(H[1, :, -1], dataset.tensors()['observations'][12, :HIST_DIM])


def test_empty_dataset():
    with pytest.raises(EmptyTrajectoryError):
        DistillDataset().tensors()


def test_latent_ablation_keeps_only_the_action_error():
    latent, target_latent = torch.zeros(4, 64, dtype=DTYPE), torch.ones(4, 64, dtype=DTYPE)
    action, target_action = torch.zeros(4, 16, dtype=DTYPE), torch.full((4, 16), 0.5, dtype=DTYPE)
    assert float(distill_loss(latent, action, target_latent, target_action, latent_loss=False)) == pytest.approx(4.0)
    assert float(distill_loss(latent, action, target_latent, target_action)) == pytest.approx(68.0)


def test_distillation_lowers_the_loss():
    dataset = _dataset(episodes=(40, 24))
    student = TcnStudent(1, 8).to(DTYPE)
    optimizer = torch.optim.Adam(student.parameters(), lr=1e-3)
    config = DistillConfig(minibatches=2)
    rng = np.random.default_rng(0)
    losses = [distill_epoch(student, optimizer, None, dataset, config, rng) for _ in range(25)]
    assert losses[-1] < losses[0]


def test_windows_reproduce_the_full_sequence():
    student = GruStudent().to(DTYPE)
    g = torch.Generator().manual_seed(2)
    obs = torch.randn(2, 10, OBS_DIM, generator=g, dtype=DTYPE)
    inputs = stream_inputs(obs)
    assert torch.all(inputs[:, 0] == 0)
    assert torch.equal(inputs[:, 1], obs[:, 0, :HIST_DIM])
    _, full, _ = student.forward_sequence(obs, inputs)
    pieces = torch.cat([actions for _, _, actions in bptt_windows(student, obs, inputs, 3)], dim=1)
    assert torch.allclose(pieces, full, atol=1e-12)


def test_full_length_window_matches_full_backpropagation():
    student = GruStudent().to(DTYPE)
    g = torch.Generator().manual_seed(3)
    obs = torch.randn(2, 8, OBS_DIM, generator=g, dtype=DTYPE)
    target = torch.randn(2, 8, 16, generator=g, dtype=DTYPE)
    inputs = stream_inputs(obs)
    params = list(student.parameters())

    _, full, _ = student.forward_sequence(obs, inputs)
    expected = torch.autograd.grad(((full - target) ** 2).sum(), params)

    [(_, _, windowed)] = list(bptt_windows(student, obs, inputs, 8))
    actual = torch.autograd.grad(((windowed - target) ** 2).sum(), params)
    for a, b in zip(actual, expected):
        assert torch.allclose(a, b, atol=1e-10)


def test_truncated_epoch_trains_a_recurrent_student():
    dataset = _dataset(episodes=(12, 7, 9))
    student = GruStudent().to(DTYPE)
    optimizer = torch.optim.Adam(student.parameters(), lr=1e-3)
    config = DistillConfig(arch='gru', minibatches=2, bptt_length=5)
    rng = np.random.default_rng(1)
    losses = [truncated_bptt_epoch(student, optimizer, None, dataset, config, rng) for _ in range(10)]
    assert all(np.isfinite(losses))
    assert losses[-1] < losses[0]
