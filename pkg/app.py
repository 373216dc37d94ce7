"""
Lab factory and initialization.
"""
import json
import logging
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

from config import LabConfig, get_profile, load_config
from utils.validators import Validator

logger = logging.getLogger('blindgait')


class JSONFormatter(logging.Formatter):
    """JSON log formatter for structured logging."""

    def format(self, record):
        log_entry = {
            'timestamp': datetime.now(timezone.utc).isoformat(),
            'level': record.levelname,
            'logger': record.name,
            'message': record.getMessage(),
            'module': record.module,
            'function': record.funcName,
            'line': record.lineno,
        }

        # Add exception info if present
        if record.exc_info:
            log_entry['exception'] = self.formatException(record.exc_info)

        # Add extra fields
        if hasattr(record, 'extra_fields'):
            log_entry.update(record.extra_fields)

        return json.dumps(log_entry, default=str)


def setup_logging(level='INFO', log_file=None):
    """Setup structured JSON logging on the `blindgait` logger tree."""
    root = logging.getLogger()
    for handler in root.handlers[:]:
        if getattr(handler, '_blindgait', False):
            root.removeHandler(handler)

    json_formatter = JSONFormatter()

    console_handler = logging.StreamHandler()
    console_handler.setFormatter(json_formatter)
    console_handler.setLevel(level)
    console_handler._blindgait = True
    root.addHandler(console_handler)

    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(log_file)
        file_handler.setFormatter(json_formatter)
        file_handler.setLevel(logging.INFO)
        file_handler._blindgait = True
        root.addHandler(file_handler)

    root.setLevel(level)


@dataclass
class Lab:
    """Everything a command needs: validated config, seed, output directory, worker count."""
    config: LabConfig
    profile: str
    seed: int
    out_dir: Path
    workers: int

    def path(self, name):
        """Path of an output file, creating the output directory on first use."""
        self.out_dir.mkdir(parents=True, exist_ok=True)
        return self.out_dir / name


def create_lab(config_path=None, profile=None, seed=0, out_dir='out', overrides=None, configure_logging=True):
    """Lab factory pattern."""
    profile_cls = get_profile(profile)
    if configure_logging:
        setup_logging(profile_cls.log_level(), profile_cls.log_file())

    lab_config = load_config(config_path, profile, overrides)
    lab = Lab(
        config=lab_config,
        profile=profile_cls.NAME,
        seed=Validator.validate_seed(seed),
        out_dir=Path(out_dir),
        workers=profile_cls.workers(),
    )

    logger.info("Lab created", extra={
        'extra_fields': {
            'profile': lab.profile,
            'config_path': str(config_path) if config_path else None,
            'seed': lab.seed,
            'workers': lab.workers,
            'out_dir': str(lab.out_dir),
        }
    })
    return lab
