"""
Analysis service - decoder training, diagnostic scenarios, desirability maps
and saliency reports for trained policies.
"""
import logging
import math

import numpy as np
import torch

from analysis import contact_accuracy, decode, decoder_loss, heading_error, saliency, train_decoder_epoch, trajectory_cot
from curriculum import measurement_probability
from environment import PRIV_CONTINUOUS, PRIV_SCANS
from models import Command, DisturbanceSchedule, MetricsRecord
from networks import Decoder, parameter_hash, save_checkpoint
from services.rollout_service import (EpisodeJob, PolicySnapshot, RolloutContext, RolloutService, history_length_of,
                                      run_episode)
from services.student_service import load_policy, student_predictions
from services.teacher_service import TeacherService
from terrain import PARAMETER_SPACES, TerrainParams, TerrainType
from training import DistillDataset, decay_schedule, gather_histories
from utils import plots
from utils.errors import CheckpointError, UndefinedMetricError, ValidationError
from utils.reports import write_csv, write_json

logger = logging.getLogger(__name__)

POLICY_KINDS = ('teacher', 'tcn', 'gru')
SALIENCY_COLUMNS = 100


def actor_kind(network):
    """Deterministic Gaussian mean for stochastic policies, plain forward pass for distilled students."""
    if network.architecture().get('kind') == 'teacher' or getattr(network, 'stochastic', False):
        return 'deterministic'
    return 'student'


def observation_dataset(trajectories, dtype):
    """Observations and privileged states of student rollouts, grouped by episode."""
    dataset = DistillDataset(dtype)
    for trajectory in trajectories:
        if len(trajectory):
            obs = np.stack([t.observation for t in trajectory.transitions])
            priv = np.stack([t.privileged for t in trajectory.transitions])
            dataset.add_episode(obs, priv, np.zeros((len(obs), 64)), np.zeros((len(obs), 16)))
    return dataset


def decoder_inputs(student, trajectories, dtype):
    """(o, l, x) tensors with l computed by the frozen student."""
    dataset = observation_dataset(trajectories, dtype)
    latents, _ = student_predictions(student, dataset)
    data = dataset.tensors()
    return data['observations'], latents, data['privileged']


def scenario_steps(eval_config, control_dt):
    return max(1, int(round(eval_config.duration / control_dt)))


def crossed_step(trajectory, distance):
    """True if every foot was beyond the step edge at some logged step."""
    feet = trajectory.log.arrays()['foot_positions']
    if feet.size == 0:
        return False
    return bool(np.any(np.all(feet[:, :, 0] > distance, axis=1)))


def finite_mean(trials, name):
    """Mean of a per-trial metric over the trials where it is defined; nan if none."""
    values = np.array([t[name] for t in trials], dtype=float)
    values = values[np.isfinite(values)]
    return float(values.mean()) if values.size else float('nan')


def travel_heading(trajectory, since=0.0):
    """Mean horizontal base velocity over the part of the episode after `since`."""
    arrays = trajectory.log.arrays()
    time = arrays['time']
    if time.size < 2:
        raise UndefinedMetricError('Trajectory too short for a travel direction')
    mask = time >= since
    if mask.sum() < 2:
        mask = np.ones_like(time, dtype=bool)
    positions = arrays['base_position'][mask]
    elapsed = time[mask][-1] - time[mask][0]
    if elapsed <= 0:
        raise UndefinedMetricError('Trajectory too short for a travel direction')
    return (positions[-1, :2] - positions[0, :2]) / elapsed


class AnalysisService:
    """Post-training analysis business logic."""

    @staticmethod
    def train_decoder(lab, student_checkpoint):
        """
        Fit a decoder from (o, student latent) to the privileged state.

        The student is frozen; its parameter hash is checked before and after.

        Returns:
            dict: {'success': bool, 'checkpoint': path, 'contact_accuracy': float, 'final_loss': float}

        Raises:
            CheckpointError: If the student parameters changed
        """
        cfg = lab.config
        dtype = getattr(torch, cfg.train.dtype)
        torch.manual_seed(lab.seed)
        seeds = np.random.SeedSequence(lab.seed)
        rng = np.random.default_rng(seeds.spawn(1)[0])

        student, _ = load_policy(student_checkpoint, ('tcn', 'gru'), dtype)
        student.eval()
        for p in student.parameters():
            p.requires_grad_(False)
        student_hash = parameter_hash(student)

        decoder = Decoder().to(dtype)
        optimizer = torch.optim.Adam(decoder.parameters(), lr=cfg.decoder.learning_rate,
                                     weight_decay=cfg.decoder.weight_decay)
        scheduler = decay_schedule(optimizer, cfg.decoder.lr_decay, cfg.decoder.decay_interval)
        n_episodes = TeacherService.episodes_per_iteration(cfg.decoder.batch_size, cfg.env.max_episode_length)
        context = RolloutContext(cfg, PolicySnapshot.of(student), history_length_of(student))

        rows = []
        with RolloutService.pool(lab.workers) as pool:
            for iteration in range(cfg.decoder.iterations):
                jobs = TeacherService.plan_jobs(cfg, None, n_episodes, rng, actor=actor_kind(student))
                results = RolloutService.collect(pool, context, jobs, seeds.spawn(1)[0])
                o, l, x = decoder_inputs(student, [r.trajectory for r in results], dtype)
                losses = [train_decoder_epoch(decoder, optimizer, scheduler, o, l, x, cfg.decoder.minibatches, rng)
                          for _ in range(cfg.decoder.epochs)]
                rows.append({'iteration': iteration, 'samples': int(o.shape[0]), 'loss': losses[-1],
                             'learning_rate': optimizer.param_groups[0]['lr']})
                logger.info('Decoder iteration finished', extra={'extra_fields': rows[-1]})

            flat = [EpisodeJob(TerrainParams(TerrainType.FLAT), cfg.env.max_episode_length, actor_kind(student))
                    for _ in range(max(1, n_episodes))]
            held_out = RolloutService.collect(pool, context, flat, seeds.spawn(1)[0])
        o, l, x = decoder_inputs(student, [r.trajectory for r in held_out], dtype)
        with torch.no_grad():
            held_out_loss = float(decoder_loss(decoder, o, l, x))
        accuracy = contact_accuracy(decoder, o, l, x)

        if parameter_hash(student) != student_hash:
            raise CheckpointError('Student parameters changed during decoder training')

        checkpoint = save_checkpoint(lab.path('decoder.bin'), {'decoder': decoder}, {
            'seed': lab.seed,
            'student': str(student_checkpoint),
            'student_hash': student_hash,
        })
        write_csv(lab.path('decoder_metrics.csv'), rows)
        report = AnalysisService.uncertainty_report(lab, student, decoder, seeds.spawn(1)[0])
        summary = {
            'success': True,
            'checkpoint': str(checkpoint),
            'contact_accuracy': accuracy,
            'held_out_loss': held_out_loss,
            'final_loss': rows[-1]['loss'] if rows else float('nan'),
            'student_hash': student_hash,
            'uncertainty_report': report,
        }
        write_json(lab.path('decoder_summary.json'), summary)
        return summary

    @staticmethod
    def uncertainty_report(lab, student, decoder, seed):
        """
        Decoded height scan mean and one-sigma band along a hills rollout,
        decoded at every control step.

        Returns:
            str: path of the CSV report
        """
        cfg = lab.config
        dtype = next(decoder.parameters()).dtype
        space = PARAMETER_SPACES[TerrainType.HILLS]
        middle = space.values([cfg.curriculum.levels // 2] * space.dim, cfg.curriculum.levels)
        job = EpisodeJob(TerrainParams(TerrainType.HILLS, middle, int(lab.seed)), cfg.env.max_episode_length,
                         actor_kind(student), command=Command.toward(0.0))
        context = RolloutContext(cfg, PolicySnapshot.of(student), history_length_of(student))
        trajectory = run_episode(context, job, seed).trajectory
        o, l, x = decoder_inputs(student, [trajectory], dtype)
        means, sigmas, _ = decode(decoder, o, l)

        scan = np.searchsorted(PRIV_CONTINUOUS, np.arange(PRIV_SCANS.start, PRIV_SCANS.stop))
        truth = x[:, PRIV_SCANS].numpy()
        means, sigmas = means[:, scan].numpy(), sigmas[:, scan].numpy()
        time = np.arange(len(truth)) * cfg.sim.control_dt
        rows = []
        for t in range(len(truth)):
            row = {'time': time[t]}
            for k in range(truth.shape[1]):
                row[f'scan_{k}_truth'] = truth[t, k]
                row[f'scan_{k}_mean'] = means[t, k]
                row[f'scan_{k}_sigma'] = sigmas[t, k]
            rows.append(row)
        path = write_csv(lab.path('decoder_uncertainty.csv'), rows)
        plots.decoded_scan(time, truth[:, 0], means[:, 0], sigmas[:, 0], lab.path('decoder_uncertainty.svg'),
                           title='Decoded height under the front-left foot')
        return str(path)

    @staticmethod
    def scenario_jobs(eval_config, scenario, steps, actor, rng):
        """EpisodeJob list for a diagnostic scenario."""
        flat = TerrainParams(TerrainType.FLAT)
        jobs = []
        for trial in range(eval_config.trials):
            angle = 2.0 * math.pi * (trial % eval_config.directions) / eval_config.directions
            if scenario in ('flat', 'payload'):
                jobs.append(EpisodeJob(flat, steps, actor, command=Command.toward(angle), tag=angle))
            elif scenario == 'step':
                jobs.append(EpisodeJob(flat, steps, actor, command=Command.toward(0.0),
                                       heightmap=('step', eval_config.step_height, eval_config.step_distance)))
            elif scenario == 'slope':
                gradient = math.tan(math.radians(eval_config.slope_deg))
                heading = float(rng.uniform(-math.pi, math.pi))
                jobs.append(EpisodeJob(flat, steps, actor, command=Command.toward(heading),
                                       heightmap=('plane', gradient, 0.0), tag=heading))
            elif scenario == 'lateral-force':
                disturbance = DisturbanceSchedule((0.0, eval_config.force, 0.0), eval_config.force_start,
                                                  eval_config.force_start + eval_config.force_duration)
                jobs.append(EpisodeJob(flat, steps, actor, command=Command.toward(0.0), disturbance=disturbance))
            else:
                raise ValidationError(f'Unknown scenario {scenario!r}')
        return jobs

    @staticmethod
    def score_trial(result, scenario, eval_config):
        """Per-trial speed, COT, heading error and success."""
        trajectory = result.trajectory
        command = trajectory.command
        trial = {
            'steps': len(trajectory),
            'terminated': trajectory.terminated,
            'speed': trajectory.mean_v_pr,
            'friction': trajectory.friction,
        }
        try:
            trial['cot'] = trajectory_cot(trajectory.log, result.weight)
        except UndefinedMetricError:
            trial['cot'] = float('nan')
        since = eval_config.force_start if scenario == 'lateral-force' else 0.0
        try:
            trial['heading_error'] = heading_error(command.direction(), travel_heading(trajectory, since))
        except UndefinedMetricError:
            trial['heading_error'] = float('nan')
        if scenario == 'step':
            trial['success'] = crossed_step(trajectory, eval_config.step_distance) and not trajectory.terminated
        else:
            trial['success'] = not trajectory.terminated
        return trial

    @staticmethod
    def run_diagnostic(lab, checkpoint, scenario=None):
        """
        Evaluate a policy checkpoint on a diagnostic scenario.

        Args:
            lab: Lab
            checkpoint: Teacher or student checkpoint path
            scenario: Overrides `lab.config.eval.scenario`

        Returns:
            MetricsRecord
        """
        cfg = lab.config
        eval_config = cfg.eval
        scenario = scenario or eval_config.scenario
        dtype = getattr(torch, cfg.train.dtype)
        policy, _ = load_policy(checkpoint, POLICY_KINDS, dtype)
        steps = scenario_steps(eval_config, cfg.sim.control_dt)
        run_config = cfg.replace(env={'max_episode_length': steps, 'full_yaw': scenario == 'slope'})
        payload = eval_config.payload_kg or (eval_config.payload_default_kg if scenario == 'payload' else 0.0)

        seeds = np.random.SeedSequence(lab.seed)
        rng = np.random.default_rng(seeds.spawn(1)[0])
        jobs = AnalysisService.scenario_jobs(eval_config, scenario, steps, actor_kind(policy), rng)
        context = RolloutContext(run_config, PolicySnapshot.of(policy), history_length_of(policy),
                                 tuple(eval_config.friction_range), payload)
        logger.info('Diagnostic started', extra={'extra_fields': {
            'scenario': scenario, 'trials': len(jobs), 'steps': steps, 'payload': payload}})

        with RolloutService.pool(lab.workers) as pool:
            results = RolloutService.collect(pool, context, jobs, seeds.spawn(1)[0])
        trials = [AnalysisService.score_trial(r, scenario, eval_config) for r in results]
        for trial, job in zip(trials, jobs):
            trial['direction'] = job.tag if job.tag is not None else 0.0

        details = {'payload_kg': payload, 'steps': steps}
        if scenario in ('flat', 'payload'):
            details['directions'] = []
            for angle in sorted({t['direction'] for t in trials}):
                subset = [t for t in trials if t['direction'] == angle]
                details['directions'].append({'angle': angle, 'speed': finite_mean(subset, 'speed'),
                                              'heading_error': finite_mean(subset, 'heading_error')})
        if scenario == 'lateral-force':
            details['heading_deviation_deg'] = finite_mean(trials, 'heading_error')

        record = MetricsRecord(
            scenario=scenario,
            trials=len(trials),
            speed=finite_mean(trials, 'speed'),
            cot=finite_mean(trials, 'cot'),
            success_rate=float(np.mean([t['success'] for t in trials])),
            heading_error_deg=finite_mean(trials, 'heading_error'),
            details=details,
        )
        write_csv(lab.path(f'eval_{scenario}_trials.csv'), trials,
                  ('direction', 'steps', 'terminated', 'success', 'speed', 'cot', 'heading_error', 'friction'))
        write_json(lab.path(f'eval_{scenario}.json'), record.to_dict())
        if 'directions' in details:
            per = details['directions']
            plots.polar_profile(np.array([d['angle'] for d in per]), np.array([d['speed'] for d in per]),
                                np.array([d['heading_error'] for d in per]), lab.path(f'eval_{scenario}.svg'))
        else:
            plots.metrics_bars(record, lab.path(f'eval_{scenario}.svg'))
        logger.info('Diagnostic finished', extra={'extra_fields': record.to_dict()})
        return record

    @staticmethod
    def desirability_map(lab, checkpoint):
        """
        Traversability and desirability of a trained policy on a frequency x
        amplitude slice of the hills grid (roughness at its lowest level).

        Returns:
            dict: grid axes plus (levels, levels) traversability and desirability arrays
        """
        cfg = lab.config
        dtype = getattr(torch, cfg.train.dtype)
        policy, _ = load_policy(checkpoint, POLICY_KINDS, dtype)
        kind = TerrainType(cfg.eval.desirability_terrain)
        space = PARAMETER_SPACES[kind]
        levels = cfg.curriculum.levels
        seeds = np.random.SeedSequence(lab.seed)
        rng = np.random.default_rng(seeds.spawn(1)[0])

        # stochastic policies are measured the way the curriculum measures them during training
        actor = 'gaussian' if actor_kind(policy) == 'deterministic' else 'student'
        jobs = []
        for i in range(levels):
            for j in range(levels):
                values = space.values((0, i, j), levels)
                for _ in range(cfg.eval.desirability_trials):
                    terrain = TerrainParams(kind, values, int(rng.integers(0, 2 ** 63)))
                    jobs.append(EpisodeJob(terrain, cfg.env.max_episode_length, actor, tag=(i, j)))
        context = RolloutContext(cfg, PolicySnapshot.of(policy), history_length_of(policy))
        with RolloutService.pool(lab.workers) as pool:
            results = RolloutService.collect(pool, context, jobs, seeds.spawn(1)[0])

        samples = {}
        for result in results:
            if len(result.trajectory):
                samples.setdefault(result.tag, []).append(result.trajectory.traversability)
        tr = np.full((levels, levels), np.nan)
        desirability = np.zeros((levels, levels))
        rows = []
        grid = space.grid(levels)
        for i in range(levels):
            for j in range(levels):
                values = samples.get((i, j), [])
                tr[i, j] = float(np.mean(values)) if values else float('nan')
                desirability[i, j] = measurement_probability(values, cfg.curriculum.band)
                rows.append({'frequency': grid[1][i], 'amplitude': grid[2][j], 'trials': len(values),
                             'traversability': tr[i, j], 'desirability': desirability[i, j]})
        write_csv(lab.path('desirability.csv'), rows)
        plots.heatmap(np.nan_to_num(tr), grid[1], grid[2], lab.path('traversability_map.svg'),
                      'frequency', 'amplitude', 'traversability')
        plots.heatmap(desirability, grid[1], grid[2], lab.path('desirability_map.svg'),
                      'frequency', 'amplitude', 'desirability')
        return {'frequency': grid[1], 'amplitude': grid[2], 'traversability': tr, 'desirability': desirability}

    @staticmethod
    def saliency_report(lab, checkpoint, step=None, columns=SALIENCY_COLUMNS):
        """
        Saliency of each foot's height output over the history at one step of
        a rollout on the steps terrain.

        Returns:
            np.ndarray: (4, N) saliency, newest column last
        """
        cfg = lab.config
        dtype = getattr(torch, cfg.train.dtype)
        student, _ = load_policy(checkpoint, ('tcn', 'gru'), dtype)
        length = history_length_of(student) if student.architecture()['kind'] == 'tcn' else columns
        space = PARAMETER_SPACES[TerrainType.STEPS]
        middle = space.values([cfg.curriculum.levels // 2] * space.dim, cfg.curriculum.levels)
        job = EpisodeJob(TerrainParams(TerrainType.STEPS, middle, int(lab.seed)), cfg.env.max_episode_length,
                         actor_kind(student), command=Command.toward(0.0))
        context = RolloutContext(cfg, PolicySnapshot.of(student), history_length_of(student))
        trajectory = run_episode(context, job, np.random.SeedSequence(lab.seed)).trajectory
        if not len(trajectory):
            raise ValidationError('Saliency rollout produced no steps')
        t = len(trajectory) // 2 if step is None else min(int(step), len(trajectory) - 1)

        observations = torch.as_tensor(np.stack([tr.observation for tr in trajectory.transitions]), dtype=dtype)
        starts = np.zeros(len(trajectory), dtype=int)
        history = gather_histories(observations, starts, np.array([t]), length)[0]
        values = np.stack([saliency(student, observations[t], history, leg, cfg.robot.residual_z)
                           for leg in range(4)])
        rows = [{'leg': leg, **{f'column_{k - length}': values[leg, k] for k in range(length)}} for leg in range(4)]
        write_csv(lab.path('saliency.csv'), rows)
        plots.saliency_bars(values, lab.path('saliency.svg'), title=f'Saliency at t = {t * cfg.sim.control_dt:.2f} s')
        return values
