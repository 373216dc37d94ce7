"""
Desk-scale acceptance runs.

This script will:
1. Run a short flat-ground TRPO run and check every accepted step against the trust region
2. Train flat-ground teachers for three seeds and check the mean projected velocity
3. Compare curriculum and uniform terrain sampling on the steps family
4. Distill a teacher with and without the latent loss and check the imitation errors
5. Compare N=1 and N=100 TCN students on the 0.1 m step test
6. Checkpoint progress to resume on failure

Runtime is several hours on an 8-core desktop.
"""
import argparse
import json
import sys
from pathlib import Path
sys.path.insert(0, str(Path(__file__).parent.parent))

import numpy as np

from app import create_lab
from services.analysis_service import AnalysisService
from services.student_service import StudentService
from services.teacher_service import TeacherService
from utils.reports import read_csv, write_json

SEEDS = (1, 2, 3)
FLAT = {'terrain': {'kind': 'flat'}, 'curriculum': {'terrain_types': ['flat']},
        'train': {'iterations': 300, 'batch_size': 8000}}
STEPS = {'curriculum': {'terrain_types': ['steps']}, 'train': {'iterations': 300, 'batch_size': 8000}}
MICRO_RUN = {**FLAT, 'train': {'iterations': 200, 'batch_size': 8000}}
CHECKS = ('trust_region', 'teacher_learning', 'curriculum_trend', 'distillation', 'memory_trend')


def load_progress(path):
    """Load progress if exists."""
    if path.exists():
        try:
            return json.loads(path.read_text())
        except ValueError:
            return {}
    return {}


def save_progress(path, progress):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(progress, indent=2, sort_keys=True))


def run_step(progress, path, key, fn):
    """Run `fn` once; its JSON result is cached under `key`."""
    if key in progress:
        print(f"📋 {key}: cached")
        return progress[key]
    print(f"▶ {key}")
    progress[key] = fn()
    save_progress(path, progress)
    return progress[key]


def final_row(metrics_path):
    return read_csv(metrics_path)[-1]


def trpo_micro_run(config, out):
    lab = create_lab(config, None, SEEDS[0], out / 'trpo_micro', MICRO_RUN)
    result = TeacherService.train(lab)
    rows = read_csv(result['metrics'])
    limit = lab.config.train.kl_slack * lab.config.train.kl_threshold
    accepted = [float(r['kl']) for r in rows if r['accepted'] == '1']
    return {
        'checkpoint': result['checkpoint'],
        'iterations': len(rows),
        'accepted': len(accepted),
        'max_kl': max(accepted, default=0.0),
        'kl_limit': limit,
    }


def flat_teacher(config, out, seed):
    lab = create_lab(config, None, seed, out / f'flat_{seed}', FLAT)
    result = TeacherService.train(lab)
    return {'checkpoint': result['checkpoint'], 'mean_v_pr': float(final_row(result['metrics'])['mean_v_pr'])}


def steps_teacher(config, out, seed, curriculum):
    overrides = {**STEPS, 'curriculum': {**STEPS['curriculum'], 'enabled': curriculum}}
    name = 'curriculum' if curriculum else 'uniform'
    lab = create_lab(config, None, seed, out / f'steps_{name}_{seed}', overrides)
    result = TeacherService.train(lab)
    lengths = [float(r['mean_episode_length']) for r in read_csv(result['metrics'])]
    return {'checkpoint': result['checkpoint'], 'mean_episode_length': float(np.mean(lengths))}


def distill(config, out, teacher, latent_loss):
    overrides = {'student': {'iterations': 200, 'latent_loss': latent_loss}}
    lab = create_lab(config, None, SEEDS[0], out / f'distill_{"full" if latent_loss else "action"}', overrides)
    result = StudentService.train(lab, teacher)
    rows = read_csv(result['metrics'])
    return {
        'checkpoint': result['checkpoint'],
        'initial_action_mse': float(rows[0]['heldout_action_mse']),
        'final_action_mse': float(rows[-1]['heldout_action_mse']),
        'final_latent_mse': float(rows[-1]['heldout_latent_mse']),
    }


def memory_student(config, out, teacher, history_length):
    lab = create_lab(config, None, SEEDS[0], out / f'memory_{history_length}',
                     {'student': {'iterations': 200, 'history_length': history_length}})
    student = StudentService.train(lab, teacher)['checkpoint']
    eval_lab = create_lab(config, None, SEEDS[0], out / f'memory_{history_length}',
                          {'eval': {'scenario': 'step', 'step_height': 0.1, 'trials': 100}})
    record = AnalysisService.run_diagnostic(eval_lab, student, 'step')
    return {'checkpoint': student, 'success_rate': record.success_rate}


def main():
    """Run every acceptance step, resuming from the progress file."""
    parser = argparse.ArgumentParser(description=__doc__.split('\n')[1])
    parser.add_argument('--config', default=str(Path(__file__).parent.parent / 'configs' / 'reference.toml'))
    parser.add_argument('--out', default='acceptance')
    args = parser.parse_args()
    out = Path(args.out)
    progress_path = out / 'progress.json'
    progress = load_progress(progress_path)
    if progress:
        print(f"📋 Resuming from checkpoint: {len(progress)} steps already done\n")

    print("[1/5] TRPO trust region...")
    micro = run_step(progress, progress_path, 'trpo_micro', lambda: trpo_micro_run(args.config, out))
    passed_8 = micro['accepted'] > 0 and micro['max_kl'] <= micro['kl_limit']

    print("[2/5] Flat-ground teachers...")
    flat = [run_step(progress, progress_path, f'flat_{s}', lambda s=s: flat_teacher(args.config, out, s))
            for s in SEEDS]
    passed_9 = sum(r['mean_v_pr'] >= 0.2 for r in flat) >= 2

    print("[3/5] Curriculum against uniform terrain sampling...")
    with_curriculum = [run_step(progress, progress_path, f'steps_curriculum_{s}',
                                lambda s=s: steps_teacher(args.config, out, s, True)) for s in SEEDS]
    uniform = [run_step(progress, progress_path, f'steps_uniform_{s}',
                        lambda s=s: steps_teacher(args.config, out, s, False)) for s in SEEDS]
    passed_10 = (np.mean([r['mean_episode_length'] for r in with_curriculum])
                 >= np.mean([r['mean_episode_length'] for r in uniform]))

    teacher = max(flat, key=lambda r: r['mean_v_pr'])['checkpoint']
    print("[4/5] Distillation...")
    full = run_step(progress, progress_path, 'distill_full', lambda: distill(args.config, out, teacher, True))
    action_only = run_step(progress, progress_path, 'distill_action', lambda: distill(args.config, out, teacher, False))
    passed_11 = (full['final_action_mse'] < 0.1 * full['initial_action_mse']
                 and action_only['final_latent_mse'] > full['final_latent_mse'])

    print("[5/5] Memory length on the step test...")
    short = run_step(progress, progress_path, 'memory_1', lambda: memory_student(args.config, out, teacher, 1))
    long = run_step(progress, progress_path, 'memory_100', lambda: memory_student(args.config, out, teacher, 100))
    passed_12 = long['success_rate'] >= short['success_rate']

    report = {
        'trust_region': bool(passed_8),
        'teacher_learning': bool(passed_9),
        'curriculum_trend': bool(passed_10),
        'distillation': bool(passed_11),
        'memory_trend': bool(passed_12),
        'progress': progress,
    }
    write_json(out / 'acceptance.json', report)
    for name in CHECKS:
        print(f"{'✅' if report[name] else '❌'} {name}")
    return 0 if all(report[k] for k in CHECKS) else 1


if __name__ == '__main__':
    sys.exit(main())
