"""
Analysis commands: diagnostics, saliency and plot rendering.
"""
from pathlib import Path

from commands import lab_from_args, require
from services.analysis_service import AnalysisService
from utils import plots
from utils.errors import ValidationError
from utils.reports import read_csv

SCENARIOS = ('flat', 'step', 'slope', 'lateral-force', 'payload')
PLOT_KINDS = ('training', 'distillation', 'curriculum')


def register(subparsers, common):
    evaluate = subparsers.add_parser('eval', parents=[common], help='Run a diagnostic scenario on a checkpoint')
    evaluate.add_argument('--scenario', choices=SCENARIOS, help='Overrides [eval] scenario')
    evaluate.add_argument('--trials', type=int, help='Overrides [eval] trials')
    evaluate.add_argument('--desirability', action='store_true',
                          help='Estimate the traversability/desirability map instead')
    evaluate.set_defaults(handler=run_eval)

    sal = subparsers.add_parser('saliency', parents=[common], help='History saliency of a student checkpoint')
    sal.add_argument('--step', type=int, help='Control step of the rollout to analyse (default: middle)')
    sal.set_defaults(handler=run_saliency)

    plot = subparsers.add_parser('plot', parents=[common], help='Render SVG figures from a metrics CSV')
    plot.add_argument('metrics', help='CSV written by a training command')
    plot.add_argument('--kind', choices=PLOT_KINDS, default='training')
    plot.set_defaults(handler=run_plot)


def run_eval(args):
    overrides = {'eval': {'trials': args.trials}} if args.trials else None
    lab = lab_from_args(args, overrides)
    checkpoint = require(args, '--checkpoint')
    if args.desirability:
        result = AnalysisService.desirability_map(lab, checkpoint)
        return {'success': True, 'cells': int(result['desirability'].size),
                'mean_desirability': float(result['desirability'].mean())}
    record = AnalysisService.run_diagnostic(lab, checkpoint, args.scenario)
    return {'success': True, **record.to_dict()}


def run_saliency(args):
    lab = lab_from_args(args)
    values = AnalysisService.saliency_report(lab, require(args, '--checkpoint'), args.step)
    return {'success': True, 'columns': int(values.shape[1]), 'peak_column': [int(v) for v in values.argmax(axis=1)]}


def run_plot(args):
    lab = lab_from_args(args)
    path = Path(args.metrics)
    if not path.is_file():
        raise ValidationError(f'Metrics file not found: {path}', payload={'flag': 'metrics'})
    rows = read_csv(path)
    out = lab.path(f'{path.stem}.svg')
    if args.kind == 'curriculum':
        for row in rows:
            row['parameters'] = [float(v) for v in row['parameters'].split()] if row['parameters'] else []
        plots.curriculum_evolution(rows, out)
    elif args.kind == 'distillation':
        plots.distillation_curves(rows, out)
    else:
        plots.training_curves(rows, out, title=path.stem)
    return {'success': True, 'plot': str(out)}
