"""
Teacher service - trains the privileged teacher policy with TRPO on the
terrain curriculum.
"""
import json
import logging
import math

import numpy as np
import torch

from curriculum import CurriculumState, curriculum_update, uniform_terrain
from networks import TeacherPolicy, ValueBaseline, build_student, save_checkpoint
from services.rollout_service import EpisodeJob, PolicySnapshot, RolloutContext, RolloutService, history_length_of
from training import TransitionBatch, estimate_advantages, fit_value, trpo_update
from utils import plots
from utils.errors import EmptyTrajectoryError, ValidationError
from utils.reports import write_csv

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ('iteration', 'episodes', 'steps', 'mean_reward', 'mean_episode_length', 'mean_v_pr',
                  'traversability', 'kl', 'improvement', 'accepted', 'reason', 'value_loss', 'curriculum')
CURRICULUM_COLUMNS = ('iteration', 'terrain', 'particle', 'parameters', 'tr_mean', 'probability', 'weight')


class TeacherService:
    """Teacher training business logic."""

    @staticmethod
    def episodes_per_iteration(batch_size, episode_length):
        """Episodes whose full length adds up to at least `batch_size` steps."""
        return max(1, math.ceil(batch_size / episode_length))

    @staticmethod
    def plan_jobs(lab_config, curriculum, n_episodes, rng, actor='gaussian'):
        """
        Terrain for the next batch of episodes.

        Args:
            lab_config: LabConfig
            curriculum: CurriculumState, or None for uniform terrain sampling
            n_episodes: Number of episodes
            rng: numpy Generator of the training loop
            actor: Actor kind for every job

        Returns:
            list: EpisodeJob per episode, tagged with its curriculum slot
        """
        steps = lab_config.env.max_episode_length
        if curriculum is None:
            cfg = lab_config.curriculum
            return [EpisodeJob(uniform_terrain(cfg.terrain_types, cfg.levels, rng), steps, actor)
                    for _ in range(n_episodes)]
        slots = curriculum.allocate(n_episodes, rng)
        return [EpisodeJob(curriculum.terrain(slot, rng), steps, actor, tag=slot) for slot in slots]

    @staticmethod
    def record_traversability(curriculum, results):
        """Feed each non-empty episode's traversability back to its particle."""
        if curriculum is None:
            return
        for result in results:
            if result.tag is not None and len(result.trajectory):
                curriculum.record(result.tag, result.trajectory.traversability)

    @staticmethod
    def episode_stats(trajectories):
        steps = sum(len(t) for t in trajectories)
        if steps == 0:
            raise EmptyTrajectoryError('No steps collected this iteration')
        v_pr = np.concatenate([[tr.v_pr for tr in t.transitions] for t in trajectories if len(t)])
        labels = np.concatenate([t.labels for t in trajectories if len(t)])
        return {
            'episodes': len(trajectories),
            'steps': steps,
            'mean_reward': float(np.mean([t.total_reward for t in trajectories])),
            'mean_episode_length': float(np.mean([len(t) for t in trajectories])),
            'mean_v_pr': float(v_pr.mean()),
            'traversability': float(labels.mean()),
        }

    @staticmethod
    def policy_iteration(policy, value, value_optimizer, trajectories, train_config, rng, history_length=None):
        """
        One TRPO step plus a value fit on a batch of trajectories.

        Returns:
            dict: TRPO statistics and the value loss
        """
        dtype = next(policy.parameters()).dtype
        batch = TransitionBatch.from_trajectories(trajectories, dtype, history_length)
        with torch.no_grad():
            values = value(batch.observations, batch.privileged).numpy()
            next_values = value(batch.next_observations, batch.next_privileged).numpy()
        advantages, returns = estimate_advantages(batch.rewards, values, next_values, batch.dones,
                                                  batch.terminated, train_config.discount,
                                                  train_config.gae_lambda)
        stats = trpo_update(policy, batch.observations, batch.privileged, batch.histories, batch.actions,
                            torch.as_tensor(advantages, dtype=dtype), train_config)
        stats['value_loss'] = fit_value(value, value_optimizer, batch.observations, batch.privileged, returns,
                                        train_config.value_epochs, train_config.value_minibatches, rng)
        return stats

    @staticmethod
    def build_policy(lab_config, direct=False):
        dtype = getattr(torch, lab_config.train.dtype)
        if not direct:
            return TeacherPolicy().to(dtype)
        if lab_config.student.arch != 'tcn':
            raise ValidationError('Direct training needs a TCN student', payload={'arch': lab_config.student.arch})
        return build_student(lab_config.student, dtype, stochastic=True)

    @staticmethod
    def train(lab, direct=False, name=None):
        """
        Train a policy with TRPO.

        Args:
            lab: Lab
            direct: Train a stochastic TCN student on proprioception instead of the teacher
            name: Output file stem; 'teacher' or 'direct' by default

        Returns:
            dict: {'success': bool, 'checkpoint': path, 'metrics': path, 'final': last metrics row}
        """
        cfg = lab.config
        name = name or ('direct' if direct else 'teacher')
        torch.manual_seed(lab.seed)
        seeds = np.random.SeedSequence(lab.seed)
        rng = np.random.default_rng(seeds.spawn(1)[0])

        policy = TeacherService.build_policy(cfg, direct)
        dtype = next(policy.parameters()).dtype
        value = ValueBaseline().to(dtype)
        value_optimizer = torch.optim.Adam(value.parameters(), lr=cfg.train.value_learning_rate)
        history_length = history_length_of(policy) if direct else None
        curriculum = CurriculumState.create(cfg.curriculum, rng) if cfg.curriculum.enabled else None
        n_episodes = TeacherService.episodes_per_iteration(cfg.train.batch_size, cfg.env.max_episode_length)
        if curriculum is not None and n_episodes < len(curriculum.slots()) * cfg.curriculum.n_traj:
            logger.warning('Batch gives fewer than n_traj episodes per particle and iteration', extra={
                'extra_fields': {'episodes': n_episodes, 'particles': len(curriculum.slots()),
                                 'n_traj': cfg.curriculum.n_traj}})

        logger.info('Policy training started', extra={'extra_fields': {
            'name': name,
            'iterations': cfg.train.iterations,
            'episodes_per_iteration': n_episodes,
            'curriculum': cfg.curriculum.enabled,
            'workers': lab.workers,
        }})

        rows, curriculum_rows = [], []
        with RolloutService.pool(lab.workers) as pool:
            for iteration in range(cfg.train.iterations):
                jobs = TeacherService.plan_jobs(cfg, curriculum, n_episodes, rng)
                context = RolloutContext(cfg, PolicySnapshot.of(policy), history_length or 1)
                results = RolloutService.collect(pool, context, jobs, seeds.spawn(1)[0])
                trajectories = [r.trajectory for r in results]
                TeacherService.record_traversability(curriculum, results)

                row = {'iteration': iteration}
                row.update(TeacherService.episode_stats(trajectories))
                row.update(TeacherService.policy_iteration(policy, value, value_optimizer, trajectories, cfg.train,
                                                           rng, history_length))

                if curriculum is not None and (iteration + 1) % cfg.curriculum.n_evaluate == 0:
                    curriculum, update_rows = curriculum_update(curriculum, cfg.curriculum, rng)
                    curriculum_rows.extend(update_rows)
                row['curriculum'] = json.dumps(curriculum.summary(), sort_keys=True) if curriculum else ''
                rows.append(row)
                logger.info('Iteration finished', extra={'extra_fields': {
                    k: row[k] for k in METRIC_COLUMNS if k != 'curriculum'}})

        networks = {'policy': policy, 'value': value}
        checkpoint = save_checkpoint(lab.path(f'{name}.bin'), networks, {
            'seed': lab.seed,
            'profile': lab.profile,
            'iterations': cfg.train.iterations,
            'direct': direct,
        })
        metrics = write_csv(lab.path(f'{name}_metrics.csv'), rows, METRIC_COLUMNS)
        plots.training_curves(rows, lab.path(f'{name}_curves.svg'), title=f'{name} training')
        if curriculum_rows:
            write_csv(lab.path(f'{name}_curriculum.csv'), curriculum_rows, CURRICULUM_COLUMNS)
            plots.curriculum_evolution(curriculum_rows, lab.path(f'{name}_curriculum.svg'))

        return {
            'success': True,
            'checkpoint': str(checkpoint),
            'metrics': str(metrics),
            'final': rows[-1] if rows else {},
        }
