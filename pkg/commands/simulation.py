"""
Simulation commands: terrain generation and single rollouts.
"""
import math

import numpy as np
import torch

from commands import LabArgumentParser, lab_from_args
from models import Command
from services.analysis_service import actor_kind
from services.rollout_service import EpisodeJob, PolicySnapshot, RolloutContext, history_length_of, run_episode
from services.student_service import load_policy
from terrain import PARAMETER_SPACES, TerrainParams, TerrainType, generate
from utils import plots
from utils.reports import write_heightmap, write_json, write_trajectory

TERRAIN_TYPES = tuple(t.value for t in TerrainType)


def register(subparsers, common):
    terrain = subparsers.add_parser('terrain', help='Terrain tools')
    actions = terrain.add_subparsers(dest='action', metavar='ACTION', parser_class=LabArgumentParser)
    actions.required = True
    gen = actions.add_parser('gen', parents=[common], help='Generate a heightmap CSV')
    gen.add_argument('--type', dest='terrain_type', choices=TERRAIN_TYPES, help='Overrides [terrain] kind')
    gen.add_argument('--values', type=float, nargs='*', help='Overrides [terrain] values')
    gen.set_defaults(handler=terrain_gen)

    roll = subparsers.add_parser('rollout', parents=[common],
                                 help='Run one episode and dump its trajectory (zero action without --checkpoint)')
    roll.add_argument('--type', dest='terrain_type', choices=TERRAIN_TYPES, help='Overrides [terrain] kind')
    roll.add_argument('--values', type=float, nargs='*', help='Overrides [terrain] values')
    roll.add_argument('--steps', type=int, help='Control steps (default: episode length)')
    roll.add_argument('--heading', type=float, default=0.0, help='Commanded heading in degrees')
    roll.set_defaults(handler=run_rollout)


def terrain_params(lab, args):
    """TerrainParams from the [terrain] section, command-line overrides and the seed."""
    cfg = lab.config
    kind = TerrainType(args.terrain_type or cfg.terrain.kind)
    values = tuple(args.values) if args.values is not None else tuple(cfg.terrain.values)
    space = PARAMETER_SPACES[kind]
    if not values and space.dim:
        levels = cfg.curriculum.levels
        values = space.values([levels // 2] * space.dim, levels)
    return TerrainParams(kind, values, int(lab.seed))


def terrain_gen(args):
    lab = lab_from_args(args)
    params = terrain_params(lab, args)
    heightmap, friction = generate(params, lab.config.terrain)
    path = write_heightmap(lab.path(f'heightmap_{params.terrain_type.value}_{params.seed}.csv'), heightmap, params)
    plots.heightmap_image(heightmap, lab.path(f'heightmap_{params.terrain_type.value}_{params.seed}.svg'))
    return {'success': True, 'heightmap': str(path), 'shape': list(heightmap.shape),
            'friction': friction.mu}


def run_rollout(args):
    lab = lab_from_args(args)
    cfg = lab.config
    params = terrain_params(lab, args)
    steps = args.steps or cfg.env.max_episode_length
    if steps > cfg.env.max_episode_length:
        cfg = cfg.replace(env={'max_episode_length': steps})

    if args.checkpoint:
        policy, _ = load_policy(args.checkpoint, ('teacher', 'tcn', 'gru'), getattr(torch, cfg.train.dtype))
        context = RolloutContext(cfg, PolicySnapshot.of(policy), history_length_of(policy))
        actor = actor_kind(policy)
    else:
        context, actor = RolloutContext(cfg), 'zero'

    job = EpisodeJob(params, steps, actor, command=Command.toward(math.radians(args.heading)))
    result = run_episode(context, job, np.random.SeedSequence(lab.seed))
    trajectory = result.trajectory
    path = write_trajectory(lab.path('trajectory.csv'), trajectory)
    summary = {
        'success': True,
        'trajectory': str(path),
        'steps': len(trajectory),
        'terminated': trajectory.terminated,
        'diverged': trajectory.diverged,
        'total_reward': trajectory.total_reward,
        'mean_v_pr': trajectory.mean_v_pr,
        'traversability': trajectory.traversability if len(trajectory) else None,
        'terrain': params.as_dict(),
    }
    write_json(lab.path('trajectory.json'), summary)
    return summary
