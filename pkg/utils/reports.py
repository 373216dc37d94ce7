"""
Report writers for command results: CSV tables, JSON summaries, heightmaps
and trajectory dumps.
"""
import csv
import json
import logging
import math
from pathlib import Path

import numpy as np

from models import REWARD_TERMS

logger = logging.getLogger(__name__)


def format_value(value):
    """Deterministic text for one CSV cell."""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return 'nan'
        return repr(value)
    if isinstance(value, (tuple, list, np.ndarray)):
        return ' '.join(format_value(v) for v in value)
    if isinstance(value, dict):
        return json.dumps(value, sort_keys=True, default=float)
    return str(value)


def write_csv(path, rows, columns=None):
    """
    Write dict rows to a CSV file.

    Args:
        path: Output file
        rows: List of dicts
        columns: Column order; defaults to the keys of the first row

    Returns:
        Path: the written file
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(columns)
        for row in rows:
            writer.writerow([format_value(row.get(c, '')) for c in columns])
    logger.info('CSV written', extra={'extra_fields': {'path': str(path), 'rows': len(rows)}})
    return path


def read_csv(path):
    """Rows of a CSV written by `write_csv`, values as strings."""
    with open(path, newline='') as f:
        return list(csv.DictReader(f))


def _json_default(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    if hasattr(value, 'value'):
        return value.value
    raise TypeError(f'Not JSON serializable: {type(value).__name__}')


def write_json(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + '\n')
    logger.info('JSON written', extra={'extra_fields': {'path': str(path)}})
    return path


def write_heightmap(path, heightmap, terrain_params=None):
    """
    Heightmap as a CSV grid preceded by three header lines: terrain type,
    grid spacing and extent (origin plus node counts). Rows run along x.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    nx, ny = heightmap.elevation.shape
    terrain_type = heightmap.terrain_type.value
    parameters = ''
    if terrain_params is not None:
        parameters = ' ' + ' '.join(f'{k}={v!r}' for k, v in terrain_params.as_dict().items())
        parameters += f' seed={terrain_params.seed}'
    with open(path, 'w') as f:
        f.write(f'# type={terrain_type}{parameters}\n')
        f.write(f'# spacing={heightmap.spacing!r} smooth={int(heightmap.smooth)}\n')
        f.write(f'# extent origin_x={float(heightmap.origin[0])!r} origin_y={float(heightmap.origin[1])!r} '
                f'nx={nx} ny={ny}\n')
        for row in heightmap.elevation:
            f.write(','.join(repr(float(v)) for v in row) + '\n')
    logger.info('Heightmap written', extra={'extra_fields': {'path': str(path), 'shape': [nx, ny]}})
    return path


def read_heightmap(path):
    """
    Parse a heightmap CSV.

    Returns:
        tuple: (header dict, (nx, ny) elevation array)
    """
    header = {}
    with open(path) as f:
        lines = f.read().splitlines()
    for line in lines[:3]:
        for token in line.lstrip('# ').split():
            if '=' in token:
                key, value = token.split('=', 1)
                header[key] = value
    elevation = np.array([[float(v) for v in line.split(',')] for line in lines[3:] if line])
    return header, elevation


def trajectory_rows(trajectory):
    """One dict per control step: time, base pose and twist, joints, torques, contacts, reward terms."""
    arrays = trajectory.log.arrays()
    rows = []
    for i, transition in enumerate(trajectory.transitions[:len(trajectory.log)]):
        row = {'time': arrays['time'][i]}
        for name, labels in (('base_position', 'xyz'), ('base_linear_velocity', 'xyz'),
                             ('base_angular_velocity', 'xyz')):
            for axis, value in zip(labels, arrays[name][i]):
                row[f'{name}_{axis}'] = value
        for axis, value in zip('wxyz', arrays['base_orientation'][i]):
            row[f'base_orientation_{axis}'] = value
        for j in range(12):
            row[f'theta_{j}'] = arrays['joint_positions'][i][j]
            row[f'theta_dot_{j}'] = arrays['joint_velocities'][i][j]
            row[f'tau_{j}'] = arrays['torques'][i][j]
        for leg in range(4):
            row[f'contact_{leg}'] = bool(arrays['foot_contact'][i][leg])
        row['body_contacts'] = arrays['body_contacts'][i]
        row['reward'] = transition.reward
        for name, value in zip(REWARD_TERMS, transition.reward_terms):
            row[name] = value
        row['v_pr'] = transition.v_pr
        row['label'] = transition.label
        rows.append(row)
    return rows


def write_trajectory(path, trajectory):
    return write_csv(path, trajectory_rows(trajectory))
