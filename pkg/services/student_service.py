"""
Student service - distills the teacher into a proprioceptive student with
dataset aggregation, and runs the direct-training ablation.
"""
import logging

import numpy as np
import torch

from curriculum import CurriculumState, curriculum_update
from networks import (GruStudent, build_student, copy_shared_layers, load_checkpoint, parameter_hash,
                      save_checkpoint, teacher_forward)
from services.rollout_service import PolicySnapshot, RolloutContext, RolloutService, history_length_of
from services.teacher_service import CURRICULUM_COLUMNS, TeacherService
from training import DistillDataset, decay_schedule, distill_epoch, stream_inputs, truncated_bptt_epoch
from utils import plots
from utils.errors import CheckpointError
from utils.reports import write_csv

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ('iteration', 'episodes', 'steps', 'dataset_size', 'mean_v_pr', 'traversability',
                  'heldout_action_mse', 'heldout_latent_mse', 'loss', 'learning_rate')

PREDICTION_CHUNK = 1024


def load_policy(path, kind, dtype=torch.float64):
    """
    The 'policy' (or 'student') network of a checkpoint, checked for its kind.

    Raises:
        CheckpointError: If the checkpoint holds no network of that kind
    """
    networks, metadata = load_checkpoint(path, dtype)
    for name in ('policy', 'student'):
        net = networks.get(name)
        if net is not None and net.architecture().get('kind') in kind:
            return net, metadata
    raise CheckpointError(f'Checkpoint {path} holds no {"/".join(kind)} network', payload={'flag': '--checkpoint'})


@torch.no_grad()
def student_predictions(student, dataset):
    """
    Student latents and actions for every sample of a DistillDataset, with
    histories rebuilt from the stored episodes.

    Returns:
        tuple: (latents (n, 64), actions (n, 16)) tensors
    """
    data = dataset.tensors()
    if isinstance(student, GruStudent):
        latents, actions = [], []
        for a, b in dataset.episodes():
            obs = data['observations'][a:b][None]
            l, act, _ = student.forward_sequence(obs, stream_inputs(obs))
            latents.append(l[0])
            actions.append(act[0])
        return torch.cat(latents), torch.cat(actions)

    n = len(dataset)
    latents, actions = [], []
    for start in range(0, n, PREDICTION_CHUNK):
        idx = np.arange(start, min(start + PREDICTION_CHUNK, n))
        l, act = student(data['observations'][torch.as_tensor(idx)], dataset.histories(idx, student.receptive_field))
        latents.append(l)
        actions.append(act)
    return torch.cat(latents), torch.cat(actions)


def imitation_errors(student, dataset):
    """Mean squared action and latent errors of the student against the teacher labels."""
    data = dataset.tensors()
    latents, actions = student_predictions(student, dataset)
    action_mse = float(((actions - data['actions']) ** 2).sum(-1).mean())
    latent_mse = float(((latents - data['latents']) ** 2).sum(-1).mean())
    return action_mse, latent_mse


class StudentService:
    """Student distillation business logic."""

    @staticmethod
    @torch.no_grad()
    def label_episode(teacher, trajectory):
        """
        Teacher latent and mean action for every state the student visited.

        Returns:
            tuple: (observations, privileged, latents, actions) as numpy arrays
        """
        observations = np.stack([t.observation for t in trajectory.transitions])
        privileged = np.stack([t.privileged for t in trajectory.transitions])
        latents, actions, _ = teacher_forward(observations, privileged, teacher)
        return observations, privileged, latents.numpy(), actions.numpy()

    @staticmethod
    def aggregate(teacher, trajectories, dtype):
        dataset = DistillDataset(dtype)
        for trajectory in trajectories:
            if len(trajectory):
                dataset.add_episode(*StudentService.label_episode(teacher, trajectory))
        return dataset

    @staticmethod
    def merge(target, source):
        for i in range(len(source.episode_lengths)):
            target.add_episode(source.observations[i], source.privileged[i], source.latents[i], source.actions[i])
        return target

    @staticmethod
    def train(lab, teacher_checkpoint):
        """
        Distill a teacher checkpoint into the student named by `lab.config.student`.

        The student drives the robot; the teacher labels the visited states from
        their stored privileged inputs. Each iteration's new data is scored
        before training on it (held-out error).

        Returns:
            dict: {'success': bool, 'checkpoint': path, 'metrics': path, 'final': last metrics row}
        """
        cfg = lab.config
        dtype = getattr(torch, cfg.train.dtype)
        torch.manual_seed(lab.seed)
        seeds = np.random.SeedSequence(lab.seed)
        rng = np.random.default_rng(seeds.spawn(1)[0])

        teacher, _ = load_policy(teacher_checkpoint, ('teacher',), dtype)
        teacher.eval()
        teacher_hash = parameter_hash(teacher)
        student = copy_shared_layers(teacher, build_student(cfg.student, dtype))
        optimizer = torch.optim.Adam(student.parameters(), lr=cfg.student.learning_rate)
        scheduler = decay_schedule(optimizer, cfg.student.lr_decay, cfg.student.decay_interval)
        epoch_fn = truncated_bptt_epoch if cfg.student.arch == 'gru' else distill_epoch

        use_curriculum = cfg.student.use_curriculum and cfg.curriculum.enabled
        curriculum = CurriculumState.create(cfg.curriculum, rng) if use_curriculum else None
        n_episodes = TeacherService.episodes_per_iteration(cfg.student.batch_size, cfg.env.max_episode_length)
        history_length = history_length_of(student)

        logger.info('Distillation started', extra={'extra_fields': {
            'arch': cfg.student.arch,
            'history_length': cfg.student.history_length,
            'latent_loss': cfg.student.latent_loss,
            'iterations': cfg.student.iterations,
            'teacher_hash': teacher_hash,
        }})

        dataset = DistillDataset(dtype)
        rows, curriculum_rows = [], []
        with RolloutService.pool(lab.workers) as pool:
            for iteration in range(cfg.student.iterations):
                jobs = TeacherService.plan_jobs(cfg, curriculum, n_episodes, rng, actor='student')
                context = RolloutContext(cfg, PolicySnapshot.of(student), history_length)
                results = RolloutService.collect(pool, context, jobs, seeds.spawn(1)[0])
                trajectories = [r.trajectory for r in results]
                TeacherService.record_traversability(curriculum, results)

                fresh = StudentService.aggregate(teacher, trajectories, dtype)
                row = {'iteration': iteration}
                row.update({k: v for k, v in TeacherService.episode_stats(trajectories).items()
                            if k in METRIC_COLUMNS})
                row['heldout_action_mse'], row['heldout_latent_mse'] = imitation_errors(student, fresh)

                StudentService.merge(dataset, fresh)
                losses = [epoch_fn(student, optimizer, scheduler, dataset, cfg.student, rng)
                          for _ in range(cfg.student.epochs)]
                row['loss'] = losses[-1]
                row['dataset_size'] = len(dataset)
                row['learning_rate'] = optimizer.param_groups[0]['lr']

                if curriculum is not None and (iteration + 1) % cfg.curriculum.n_evaluate == 0:
                    curriculum, update_rows = curriculum_update(curriculum, cfg.curriculum, rng)
                    curriculum_rows.extend(update_rows)
                rows.append(row)
                logger.info('Distillation iteration finished', extra={'extra_fields': row})

        if parameter_hash(teacher) != teacher_hash:
            raise CheckpointError('Teacher parameters changed during distillation')

        name = f'student_{cfg.student.arch}{cfg.student.history_length if cfg.student.arch == "tcn" else ""}'
        checkpoint = save_checkpoint(lab.path(f'{name}.bin'), {'student': student}, {
            'seed': lab.seed,
            'profile': lab.profile,
            'teacher': str(teacher_checkpoint),
            'teacher_hash': teacher_hash,
            'latent_loss': cfg.student.latent_loss,
        })
        metrics = write_csv(lab.path(f'{name}_metrics.csv'), rows, METRIC_COLUMNS)
        plots.distillation_curves(rows, lab.path(f'{name}_curves.svg'))
        if curriculum_rows:
            write_csv(lab.path(f'{name}_curriculum.csv'), curriculum_rows, CURRICULUM_COLUMNS)

        return {
            'success': True,
            'checkpoint': str(checkpoint),
            'metrics': str(metrics),
            'final': rows[-1] if rows else {},
        }

    @staticmethod
    def train_direct(lab):
        """Ablation: a stochastic TCN student trained with TRPO on the teacher's reward."""
        return TeacherService.train(lab, direct=True)
