"""
Training commands: teacher, student and decoder.
"""
from commands import lab_from_args, require
from services.analysis_service import AnalysisService
from services.student_service import StudentService
from services.teacher_service import TeacherService


def register(subparsers, common):
    teacher = subparsers.add_parser('train-teacher', parents=[common], help='Train the privileged teacher with TRPO')
    teacher.add_argument('--uniform', action='store_true', help='Uniform terrain sampling instead of the curriculum')
    teacher.set_defaults(handler=train_teacher)

    student = subparsers.add_parser('train-student', parents=[common],
                                    help='Distill a teacher checkpoint into a proprioceptive student')
    student.add_argument('--direct', action='store_true',
                         help='Train a TCN student directly with TRPO (no teacher)')
    student.add_argument('--arch', choices=('tcn', 'gru'), help='Student architecture')
    student.add_argument('--history', type=int, metavar='N', help='TCN history length')
    student.add_argument('--no-latent-loss', action='store_true', help='Imitate actions only')
    student.set_defaults(handler=train_student)

    decoder = subparsers.add_parser('train-decoder', parents=[common],
                                    help='Fit a privileged-state decoder to a frozen student')
    decoder.set_defaults(handler=train_decoder)


def train_teacher(args):
    overrides = {'curriculum': {'enabled': False}} if args.uniform else None
    lab = lab_from_args(args, overrides)
    return TeacherService.train(lab)


def _student_overrides(args):
    student = {}
    if args.arch:
        student['arch'] = args.arch
    if args.history is not None:
        student['history_length'] = args.history
    if args.no_latent_loss:
        student['latent_loss'] = False
    return {'student': student} if student else None


def train_student(args):
    lab = lab_from_args(args, _student_overrides(args))
    if args.direct:
        return StudentService.train_direct(lab)
    return StudentService.train(lab, require(args, '--checkpoint'))


def train_decoder(args):
    lab = lab_from_args(args)
    return AnalysisService.train_decoder(lab, require(args, '--checkpoint'))
