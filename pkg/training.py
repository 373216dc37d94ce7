"""
Optimization engines: GAE advantages, TRPO for Gaussian policies, value
regression, supervised distillation and truncated backpropagation through time.
"""
import logging
import math
from dataclasses import dataclass

import numpy as np
import torch

from environment import HIST_DIM
from networks import flat_parameters, gaussian_logprob, kl_divergence, set_flat_parameters
from utils.errors import EmptyTrajectoryError, OptimizationError

logger = logging.getLogger(__name__)


def episode_starts(dones):
    """Index of the first step of each sample's episode, given per-step done flags."""
    dones = np.asarray(dones, dtype=bool)
    starts = np.zeros(dones.size, dtype=int)
    start = 0
    for i in range(dones.size):
        starts[i] = start
        if dones[i]:
            start = i + 1
    return starts


def gather_histories(observations, starts, indices, length):
    """
    (B, 48, length) histories of h vectors preceding each index, zero before the episode start.

    Column j of sample i holds h at step i - length + j, so the newest column is h_{i-1}.
    """
    steps = np.asarray(indices)[:, None] - length + np.arange(length)[None, :]
    valid = steps >= np.asarray(starts)[np.asarray(indices)][:, None]
    h = observations[..., :HIST_DIM]
    gathered = h[np.clip(steps, 0, None)]
    mask = torch.as_tensor(valid, dtype=gathered.dtype)[..., None]
    return (gathered * mask).transpose(-1, -2)


@dataclass
class TransitionBatch:
    """Flattened, time-ordered transitions of several episodes."""
    observations: torch.Tensor
    privileged: torch.Tensor
    actions: torch.Tensor
    rewards: np.ndarray
    dones: np.ndarray
    terminated: np.ndarray
    log_probs: torch.Tensor
    next_observations: torch.Tensor
    next_privileged: torch.Tensor
    starts: np.ndarray
    histories: torch.Tensor = None

    def __len__(self):
        return self.rewards.size

    @classmethod
    def from_trajectories(cls, trajectories, dtype=torch.float64, history_length=None):
        transitions = [t for trajectory in trajectories for t in trajectory.transitions]
        if not transitions:
            raise EmptyTrajectoryError('No transitions collected')

        def stack(name):
            return torch.as_tensor(np.stack([getattr(t, name) for t in transitions]), dtype=dtype)

        dones = np.array([t.done for t in transitions], dtype=bool)
        batch = cls(
            observations=stack('observation'),
            privileged=stack('privileged'),
            actions=stack('action'),
            rewards=np.array([t.reward for t in transitions]),
            dones=dones,
            terminated=np.array([t.terminated for t in transitions], dtype=bool),
            log_probs=torch.as_tensor([t.log_prob for t in transitions], dtype=dtype),
            next_observations=stack('next_observation'),
            next_privileged=stack('next_privileged'),
            starts=episode_starts(dones),
        )
        if history_length:
            batch.histories = gather_histories(batch.observations, batch.starts, np.arange(len(batch)),
                                               history_length)
        return batch


def estimate_advantages(rewards, values, next_values, dones, terminated, gamma=0.995, lam=0.95, normalize=True):
    """
    Generalized advantage estimation over contiguous episodes.

    Bootstraps with the next state's value on time-limit ends and with zero on termination.

    Returns:
        tuple: (advantages, returns) where returns = advantages (before normalization) + values
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    next_values = np.asarray(next_values, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    terminated = np.asarray(terminated, dtype=bool)

    advantages = np.zeros_like(rewards)
    running = 0.0
    for t in range(rewards.size - 1, -1, -1):
        bootstrap = 0.0 if terminated[t] else next_values[t]
        delta = rewards[t] + gamma * bootstrap - values[t]
        running = delta + (0.0 if dones[t] else gamma * lam * running)
        advantages[t] = running
    returns = advantages + values
    if normalize and advantages.size > 1:
        std = advantages.std()
        advantages = (advantages - advantages.mean()) / (std if std > 1e-12 else 1.0)
    return advantages, returns


def conjugate_gradient(matrix_vector, b, iterations=50, tolerance=1e-10):
    """
    Solve A x = b for symmetric positive definite A given only A @ v.

    Raises:
        OptimizationError: On non-positive curvature or non-finite values
    """
    x = torch.zeros_like(b)
    r = b.clone()
    p = b.clone()
    rr = torch.dot(r, r)
    for i in range(iterations):
        if rr <= tolerance:
            break
        Ap = matrix_vector(p)
        curvature = torch.dot(p, Ap)
        if not torch.isfinite(curvature) or curvature <= 0:
            raise OptimizationError('Conjugate gradient lost positive curvature',
                                    payload={'iteration': i, 'curvature': float(curvature)})
        alpha = rr / curvature
        x = x + alpha * p
        r = r - alpha * Ap
        rr_new = torch.dot(r, r)
        p = r + (rr_new / rr) * p
        rr = rr_new
    if not torch.all(torch.isfinite(x)):
        raise OptimizationError('Conjugate gradient produced non-finite values')
    return x


def _flat_grad(output, params, **kwargs):
    grads = torch.autograd.grad(output, params, allow_unused=True, **kwargs)
    return torch.cat([(torch.zeros_like(p) if g is None else g).reshape(-1) for p, g in zip(params, grads)])


def trpo_update(policy, observations, privileged, histories, actions, advantages, config):
    """
    One trust-region step on the surrogate mean(ratio * advantage).

    Args:
        policy: Module with `distribution(o, x, H)` returning a DiagGaussian
        observations, privileged, histories, actions: Batch tensors (histories may be None)
        advantages: (B,) tensor
        config: TrpoConfig section

    Returns:
        dict: accepted, kl, improvement, step_fraction, reason
    """
    params = [p for p in policy.parameters() if p.requires_grad]
    advantages = torch.as_tensor(advantages, dtype=actions.dtype)
    with torch.no_grad():
        old = policy.distribution(observations, privileged, histories)
        old_logp = gaussian_logprob(actions, old.mean, old.std)

    def surrogate():
        dist = policy.distribution(observations, privileged, histories)
        ratio = torch.exp(gaussian_logprob(actions, dist.mean, dist.std) - old_logp)
        return (ratio * advantages).mean(), dist

    def mean_kl():
        dist = policy.distribution(observations, privileged, histories)
        return kl_divergence(old, dist).mean()

    loss, _ = surrogate()
    g = _flat_grad(loss, params)
    stats = {'accepted': False, 'kl': 0.0, 'improvement': 0.0, 'step_fraction': 0.0, 'reason': ''}
    if not torch.any(g != 0):
        stats['reason'] = 'zero-gradient'
        return stats

    def fisher_vector(v):
        grads = _flat_grad(mean_kl(), params, create_graph=True)
        return _flat_grad(torch.dot(grads, v), params) + config.cg_damping * v

    saved = flat_parameters(policy)
    try:
        direction = conjugate_gradient(fisher_vector, g, config.cg_iterations, config.cg_tolerance)
        shs = torch.dot(direction, fisher_vector(direction))
        if not torch.isfinite(shs) or shs <= 0:
            raise OptimizationError('Non-positive step curvature', payload={'shs': float(shs)})
    except OptimizationError as exc:
        logger.warning('TRPO step rejected', extra={'extra_fields': exc.to_dict()})
        stats['reason'] = 'cg-breakdown'
        return stats

    full_step = torch.sqrt(2.0 * config.kl_threshold / shs) * direction
    base = float(loss)
    with torch.no_grad():
        for k in range(config.line_search_steps):
            fraction = 0.5 ** k
            set_flat_parameters(policy, saved + fraction * full_step)
            new_loss, dist = surrogate()
            kl = float(kl_divergence(old, dist).mean())
            improvement = float(new_loss) - base
            if math.isfinite(kl) and kl <= config.kl_slack * config.kl_threshold and improvement >= 0.0:
                stats.update(accepted=True, kl=kl, improvement=improvement, step_fraction=fraction)
                return stats
        set_flat_parameters(policy, saved)
    stats['reason'] = 'line-search'
    return stats


def fit_value(value_net, optimizer, observations, privileged, returns, epochs, minibatches, rng):
    """Regress the value baseline on returns; returns the mean squared error of the last epoch."""
    returns = torch.as_tensor(returns, dtype=observations.dtype)
    n = observations.shape[0]
    losses = []
    for _ in range(epochs):
        losses = []
        for idx in np.array_split(rng.permutation(n), minibatches):
            if idx.size == 0:
                continue
            idx = torch.as_tensor(idx)
            loss = ((value_net(observations[idx], privileged[idx]) - returns[idx]) ** 2).mean()
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss))
    return float(np.mean(losses)) if losses else 0.0


def learning_rate_at(initial, decay, interval, update):
    """lr0 * decay ** (update / interval)."""
    return initial * decay ** (update / interval)


def decay_schedule(optimizer, decay, interval):
    """Per-update exponential decay."""
    return torch.optim.lr_scheduler.LambdaLR(optimizer, lambda update: decay ** (update / interval))


class DistillDataset:
    """
    DAgger data: student-visited observations with teacher labels, kept as
    contiguous episodes so histories can be rebuilt on demand.
    """

    def __init__(self, dtype=torch.float64):
        self.dtype = dtype
        self.observations = []
        self.privileged = []
        self.latents = []
        self.actions = []
        self.episode_lengths = []
        self._cache = None

    def add_episode(self, observations, privileged, latents, actions):
        n = len(observations)
        if n == 0:
            return
        self.observations.append(np.asarray(observations, dtype=float))
        self.privileged.append(np.asarray(privileged, dtype=float))
        self.latents.append(np.asarray(latents, dtype=float))
        self.actions.append(np.asarray(actions, dtype=float))
        self.episode_lengths.append(n)
        self._cache = None

    def __len__(self):
        return int(sum(self.episode_lengths))

    def tensors(self):
        if self._cache is None:
            if not self.episode_lengths:
                raise EmptyTrajectoryError('Distillation dataset is empty')
            cat = {name: torch.as_tensor(np.concatenate(getattr(self, name)), dtype=self.dtype)
                   for name in ('observations', 'privileged', 'latents', 'actions')}
            bounds = np.cumsum([0] + self.episode_lengths)
            starts = np.concatenate([np.full(n, b) for n, b in zip(self.episode_lengths, bounds[:-1])])
            cat['starts'] = starts
            cat['bounds'] = bounds
            self._cache = cat
        return self._cache

    def histories(self, indices, length):
        data = self.tensors()
        return gather_histories(data['observations'], data['starts'], indices, length)

    def episodes(self):
        bounds = self.tensors()['bounds']
        return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]


def distill_loss(latent, action, teacher_latent, teacher_action, latent_loss=True):
    """Per-sample squared action error plus (optionally) squared latent error, averaged over samples."""
    loss = ((teacher_action - action) ** 2).sum(-1)
    if latent_loss:
        loss = loss + ((teacher_latent - latent) ** 2).sum(-1)
    return loss.mean()


def distill_epoch(student, optimizer, scheduler, dataset, config, rng):
    """
    One pass of minibatched Adam over the dataset.

    Returns:
        float: mean minibatch loss
    """
    data = dataset.tensors()
    n = len(dataset)
    if n == 0:
        raise EmptyTrajectoryError('Distillation dataset is empty')
    length = student.receptive_field
    losses = []
    for idx in np.array_split(rng.permutation(n), config.minibatches):
        if idx.size == 0:
            continue
        H = dataset.histories(idx, length)
        t = torch.as_tensor(idx)
        latent, action = student(data['observations'][t], H)
        loss = distill_loss(latent, action, data['latents'][t], data['actions'][t], config.latent_loss)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if scheduler is not None:
            scheduler.step()
        losses.append(float(loss))
    return float(np.mean(losses))


def stream_inputs(observations):
    """GRU input at step t is h_{t-1}; zeros at the first step of the episode."""
    h = observations[..., :HIST_DIM]
    return torch.cat([torch.zeros_like(h[..., :1, :]), h[..., :-1, :]], dim=-2)


def bptt_windows(student, observations, inputs, window):
    """
    Run a GRU student over (B, T, ...) sequences in windows of `window` steps,
    detaching the hidden state between windows.

    Yields:
        tuple: (time slice, latents, actions)
    """
    hidden = None
    T = observations.shape[1]
    for start in range(0, T, window):
        stop = min(start + window, T)
        if hidden is not None:
            hidden = hidden.detach()
        latents, actions, hidden = student.forward_sequence(observations[:, start:stop], inputs[:, start:stop],
                                                            hidden)
        yield slice(start, stop), latents, actions


def _pad_episodes(data, episodes):
    longest = max(b - a for a, b in episodes)
    B = len(episodes)
    obs = data['observations']
    out = {name: torch.zeros((B, longest) + data[name].shape[1:], dtype=obs.dtype)
           for name in ('observations', 'latents', 'actions')}
    mask = torch.zeros((B, longest), dtype=obs.dtype)
    for i, (a, b) in enumerate(episodes):
        for name in out:
            out[name][i, :b - a] = data[name][a:b]
        mask[i, :b - a] = 1.0
    return out, mask


def truncated_bptt_epoch(student, optimizer, scheduler, dataset, config, rng):
    """
    One pass over the episodes of `dataset`, updating after every window.

    Returns:
        float: mean window loss
    """
    data = dataset.tensors()
    episodes = dataset.episodes()
    order = rng.permutation(len(episodes))
    losses = []
    for group in np.array_split(order, min(config.minibatches, len(episodes))):
        if group.size == 0:
            continue
        padded, mask = _pad_episodes(data, [episodes[i] for i in group])
        inputs = stream_inputs(padded['observations'])
        for window, latents, actions in bptt_windows(student, padded['observations'], inputs,
                                                      config.bptt_length):
            m = mask[:, window]
            if m.sum() == 0:
                continue
            per_step = ((padded['actions'][:, window] - actions) ** 2).sum(-1)
            if config.latent_loss:
                per_step = per_step + ((padded['latents'][:, window] - latents) ** 2).sum(-1)
            loss = (per_step * m).sum() / m.sum()
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            if scheduler is not None:
                scheduler.step()
            losses.append(float(loss))
    return float(np.mean(losses)) if losses else 0.0
