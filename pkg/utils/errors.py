"""
Standardized error handling for the lab and its command line.
"""
import logging


class LabError(Exception):
    """Base lab error."""
    exit_code = 2

    def __init__(self, message, exit_code=None, payload=None):
        super().__init__(message)
        self.message = message
        if exit_code is not None:
            self.exit_code = exit_code
        self.payload = payload or {}

    def to_dict(self):
        """Convert error to dictionary for JSON summaries."""
        rv = dict(self.payload)
        rv['message'] = self.message
        rv['success'] = False
        rv['error_type'] = self.__class__.__name__
        return rv


class ValidationError(LabError):
    """Invalid input (exit 1)."""
    exit_code = 1


class ConfigError(ValidationError):
    """Missing or malformed experiment configuration (exit 1)."""


class ShapeError(ValidationError):
    """Tensor or vector dimension mismatch (exit 1)."""


class DomainError(ValidationError):
    """Argument outside the mathematical domain of an operation (exit 1)."""


class WorkspaceError(ValidationError):
    """Foot target outside the reachable leg workspace (exit 1)."""


class GimbalError(ValidationError):
    """Base x-axis parallel to gravity; horizontal frame undefined (exit 1)."""


class UndefinedMetricError(ValidationError):
    """Metric undefined for the given trajectory (exit 1)."""


class EmptyTrajectoryError(ValidationError):
    """Operation needs at least one step (exit 1)."""


class RuntimeLabError(LabError):
    """Failure while running an experiment (exit 2)."""
    exit_code = 2


class SimulationError(RuntimeLabError):
    """Simulator state diverged (exit 2)."""


class SpawnError(RuntimeLabError):
    """Episode reset could not find a collision-free initial state (exit 2)."""


class CheckpointError(RuntimeLabError):
    """Checkpoint file unreadable or incompatible (exit 2)."""


class OptimizationError(RuntimeLabError):
    """Numerical optimizer broke down (exit 2)."""


def handle_lab_error(error, logger=None):
    """
    Log a lab error with its payload and return the process exit code.

    Args:
        error: LabError instance
        logger: Logger to use (defaults to the blindgait logger)

    Returns:
        int: Exit code (1 for validation errors, 2 for runtime failures)
    """
    logger = logger or logging.getLogger('blindgait')
    fields = {
        'exit_code': error.exit_code,
        'error_type': error.__class__.__name__,
        'payload': error.payload,
    }
    if error.exit_code >= 2:
        logger.error(f"Runtime failure: {error.message}", extra={'extra_fields': fields})
    else:
        logger.warning(f"Invalid input: {error.message}", extra={'extra_fields': fields})
    return error.exit_code
