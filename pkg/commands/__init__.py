"""
Command-line interface.

Every subcommand module exposes `register(subparsers, common)`; handlers take
the parsed arguments and return a JSON-serializable summary.
"""
import argparse
import json
import logging
import sys

from utils.errors import LabError, ValidationError, handle_lab_error

logger = logging.getLogger('blindgait')

PROG = 'blindgait'


class LabArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f'{self.prog}: error: {message}\n')


def add_global_flags(parser, suppress=False):
    default = (lambda value: argparse.SUPPRESS) if suppress else (lambda value: value)
    parser.add_argument('--config', metavar='PATH', default=default(None), help='Experiment TOML file')
    parser.add_argument('--seed', metavar='U64', type=seed_value, default=default(0), help='Master seed')
    parser.add_argument('--out', metavar='DIR', default=default('out'), help='Output directory')
    parser.add_argument('--checkpoint', metavar='PATH', default=default(None), help='Checkpoint to load')
    parser.add_argument('--profile', choices=('desk', 'paper', 'test'), default=default(None),
                        help='Profile defaults (env BLINDGAIT_PROFILE)')


def seed_value(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f'invalid seed {text!r}')
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError('seed must be an unsigned 64-bit integer')
    return value


def build_parser():
    from commands import analysis, simulation, training

    parser = LabArgumentParser(prog=PROG, description='Blind quadruped locomotion training lab')
    add_global_flags(parser)
    common = LabArgumentParser(add_help=False)
    add_global_flags(common, suppress=True)
    subparsers = parser.add_subparsers(dest='command', metavar='COMMAND', parser_class=LabArgumentParser)
    subparsers.required = True
    for module in (training, analysis, simulation):
        module.register(subparsers, common)
    return parser


def require(args, flag):
    """
    Value of a global flag that this subcommand cannot run without.

    Raises:
        ValidationError: Naming the missing flag
    """
    value = getattr(args, flag.lstrip('-').replace('-', '_'), None)
    if value is None:
        raise ValidationError(f'{flag} is required for {args.command}', payload={'flag': flag})
    return value


def lab_from_args(args, overrides=None):
    """Lab for a subcommand; every lab-backed command needs --config."""
    from app import create_lab

    config_path = require(args, '--config')
    return create_lab(config_path, args.profile, args.seed, args.out, overrides)


def cli_main(argv=None):
    """
    Parse `argv`, run the subcommand and return the process exit code.

    Returns:
        int: 0 on success, 1 on invalid input, 2 on runtime failure
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    try:
        summary = args.handler(args)
    except LabError as e:
        code = handle_lab_error(e, logger)
        print(json.dumps(e.to_dict(), sort_keys=True, default=str), file=sys.stderr)
        return code
    except Exception as e:
        logger.exception('Unexpected failure', extra={'extra_fields': {'command': args.command}})
        print(json.dumps({'success': False, 'message': str(e), 'error_type': type(e).__name__}), file=sys.stderr)
        return 2

    if summary is not None:
        print(json.dumps(summary, sort_keys=True, default=str))
    return 0
