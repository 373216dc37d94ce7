"""
Rollout service - runs episodes in worker processes.

Workers receive a read-only parameter snapshot, build their own environment
and draw every random number from a child of the caller's SeedSequence, so
the trajectories depend only on the seed and the job list, never on worker
count or scheduling.
"""
import logging
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
import torch

from environment import LocomotionEnv, ZeroPolicy, rollout
from networks import GaussianActor, StudentActor, build_network
from terrain import plane_map, step_map
from utils.errors import ValidationError

logger = logging.getLogger(__name__)

ACTORS = ('gaussian', 'deterministic', 'student', 'zero')


@dataclass(frozen=True)
class PolicySnapshot:
    """Architecture dict plus parameters as numpy arrays."""
    architecture: dict
    state: dict
    dtype: str = 'float64'

    @classmethod
    def of(cls, module):
        state = {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}
        dtype = str(next(module.parameters()).dtype).replace('torch.', '')
        return cls(module.architecture(), state, dtype)

    def restore(self):
        dtype = getattr(torch, self.dtype)
        net = build_network(self.architecture, dtype)
        net.load_state_dict({k: torch.as_tensor(v, dtype=dtype) for k, v in self.state.items()})
        net.eval()
        return net


def history_length_of(network):
    """Number of h columns the environment must keep for `network`."""
    if network is None or network.architecture().get('kind') != 'tcn':
        return 1
    return int(network.receptive_field)


@dataclass(frozen=True)
class RolloutContext:
    """Settings shared by every episode of one collection call."""
    lab_config: object
    snapshot: PolicySnapshot = None
    history_length: int = 1
    friction_range: tuple = None
    payload: float = 0.0


@dataclass(frozen=True)
class EpisodeJob:
    """
    One episode to run.

    `heightmap` replaces the generated terrain: ('plane', gx, gy) or
    ('step', height, distance). `tag` is carried back untouched.
    """
    terrain: object
    steps: int
    actor: str = 'gaussian'
    command: object = None
    heightmap: tuple = None
    disturbance: object = None
    spawn_xy: tuple = (0.0, 0.0)
    tag: object = None


@dataclass
class EpisodeResult:
    trajectory: object
    tag: object = None
    weight: float = 0.0


def build_heightmap(spec, terrain_config):
    if spec is None:
        return None
    kind = spec[0]
    if kind == 'plane':
        return plane_map(spec[1], spec[2], extent=terrain_config.extent, spacing=terrain_config.hills_spacing)
    if kind == 'step':
        return step_map(spec[1], spec[2], extent=terrain_config.extent, spacing=terrain_config.block_spacing)
    raise ValidationError(f'Unknown heightmap kind {kind!r}')


def make_actor(kind, network, rng):
    if kind == 'zero':
        return ZeroPolicy()
    if network is None:
        raise ValidationError(f'Actor {kind!r} needs a policy')
    if kind == 'student':
        return StudentActor(network)
    if kind in ('gaussian', 'deterministic'):
        return GaussianActor(network, rng, deterministic=kind == 'deterministic')
    raise ValidationError(f'Unknown actor {kind!r}', payload={'actors': list(ACTORS)})


def run_episode(context, job, seed):
    """Worker entry point: one episode from scratch."""
    rng = np.random.default_rng(seed)
    network = context.snapshot.restore() if context.snapshot is not None else None
    env = LocomotionEnv(context.lab_config, rng, context.history_length, context.friction_range,
                        context.payload)
    actor = make_actor(job.actor, network, rng)
    heightmap = build_heightmap(job.heightmap, context.lab_config.terrain)
    trajectory = rollout(actor, env, job.terrain, job.steps, command=job.command, heightmap=heightmap,
                         disturbance=job.disturbance, spawn_xy=job.spawn_xy)
    return EpisodeResult(trajectory, job.tag, env.model.total_weight)


def _init_worker():
    torch.set_num_threads(1)


class RolloutService:
    """Parallel episode collection."""

    @staticmethod
    @contextmanager
    def pool(workers):
        """
        Process pool for `workers` > 1; None (run inline) otherwise.

        Yields:
            ProcessPoolExecutor or None
        """
        if workers is None or workers <= 1:
            yield None
            return
        executor = ProcessPoolExecutor(max_workers=workers, mp_context=multiprocessing.get_context('spawn'),
                                       initializer=_init_worker)
        try:
            yield executor
        finally:
            executor.shutdown(wait=True, cancel_futures=True)

    @staticmethod
    def collect(pool, context, jobs, seed_sequence):
        """
        Run every job and return results in submission order.

        Args:
            pool: Executor from `RolloutService.pool`, or None to run inline
            context: RolloutContext
            jobs: List of EpisodeJob
            seed_sequence: numpy SeedSequence; one child per job

        Returns:
            list: EpisodeResult per job
        """
        seeds = seed_sequence.spawn(len(jobs))
        if pool is None:
            results = [run_episode(context, job, seed) for job, seed in zip(jobs, seeds)]
        else:
            futures = [pool.submit(run_episode, context, job, seed) for job, seed in zip(jobs, seeds)]
            results = [future.result() for future in futures]

        steps = sum(len(r.trajectory) for r in results)
        logger.debug('Episodes collected', extra={'extra_fields': {
            'episodes': len(results),
            'steps': steps,
            'diverged': sum(r.trajectory.diverged for r in results),
        }})
        return results
