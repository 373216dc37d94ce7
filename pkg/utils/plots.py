"""
SVG figures for training curves, curriculum evolution, diagnostics and analysis.

Figures are written with a fixed hash salt and without date metadata so the
same data always produces the same file.
"""
import logging
from pathlib import Path

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np

logger = logging.getLogger(__name__)

matplotlib.rcParams['svg.hashsalt'] = 'blindgait'
matplotlib.rcParams['svg.fonttype'] = 'path'


def save_svg(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format='svg', bbox_inches='tight', metadata={'Date': None})
    plt.close(fig)
    logger.info('Plot written', extra={'extra_fields': {'path': str(path)}})
    return path


def _column(rows, name):
    return np.array([float(r[name]) for r in rows if name in r], dtype=float)


def training_curves(rows, path, title='Training'):
    """Mean reward, mean episode length and mean v_pr per iteration."""
    fig, axes = plt.subplots(3, 1, figsize=(7, 8), sharex=True)
    iterations = _column(rows, 'iteration')
    for ax, name, label in zip(axes, ('mean_reward', 'mean_episode_length', 'mean_v_pr'),
                               ('mean reward', 'episode length', 'v_pr (m/s)')):
        ax.plot(iterations, _column(rows, name), lw=1.2)
        ax.set_ylabel(label)
        ax.grid(True, alpha=0.3)
    axes[-1].set_xlabel('iteration')
    fig.suptitle(title)
    return save_svg(fig, path)


def distillation_curves(rows, path):
    fig, ax = plt.subplots(figsize=(7, 4))
    iterations = _column(rows, 'iteration')
    for name in ('heldout_action_mse', 'heldout_latent_mse', 'loss'):
        values = _column(rows, name)
        if values.size:
            ax.semilogy(iterations, np.maximum(values, 1e-12), label=name)
    ax.set_xlabel('iteration')
    ax.legend()
    ax.grid(True, alpha=0.3)
    return save_svg(fig, path)


def curriculum_evolution(rows, path):
    """Mean particle parameters per terrain type over curriculum updates."""
    by_type = {}
    for row in rows:
        by_type.setdefault(row['terrain'], []).append(row)
    types = sorted(by_type)
    fig, axes = plt.subplots(len(types) or 1, 1, figsize=(7, 2.6 * max(len(types), 1)), squeeze=False)
    for ax, terrain in zip(axes[:, 0], types):
        updates = sorted({int(r['iteration']) for r in by_type[terrain]})
        parameters = [r['parameters'] for r in by_type[terrain]]
        dim = len(parameters[0]) if parameters else 0
        for d in range(dim):
            means = [np.mean([r['parameters'][d] for r in by_type[terrain] if int(r['iteration']) == u])
                     for u in updates]
            ax.plot(updates, means, label=f'parameter {d}')
        ax.set_title(terrain)
        ax.set_xlabel('curriculum update')
        if dim:
            ax.legend(fontsize='small')
        ax.grid(True, alpha=0.3)
    fig.tight_layout()
    return save_svg(fig, path)


def polar_profile(angles, speeds, heading_errors, path):
    """Per-direction speed and heading error on polar axes."""
    fig, axes = plt.subplots(1, 2, figsize=(9, 4.5), subplot_kw={'projection': 'polar'})
    closed = np.append(angles, angles[:1])
    for ax, values, title in zip(axes, (speeds, heading_errors), ('speed (m/s)', 'heading error (deg)')):
        ax.plot(closed, np.append(values, values[:1]), marker='o')
        ax.set_title(title)
    return save_svg(fig, path)


def metrics_bars(record, path):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    names = ['speed', 'cot', 'success_rate']
    values = [record.speed, record.cot, record.success_rate]
    ax.bar(names, values, color=['#4477aa', '#ee6677', '#228833'])
    ax.set_title(f'{record.scenario} ({record.trials} trials), heading error {record.heading_error_deg:.1f} deg')
    ax.grid(True, axis='y', alpha=0.3)
    return save_svg(fig, path)


def decoded_scan(time, truth, mean, sigma, path, title='Decoded height scan'):
    """Ground truth against decoded mean and a one-sigma band for one scan point."""
    fig, ax = plt.subplots(figsize=(8, 3.5))
    ax.plot(time, truth, color='k', lw=1.0, label='ground truth')
    ax.plot(time, mean, color='#4477aa', lw=1.0, label='decoded mean')
    ax.fill_between(time, mean - sigma, mean + sigma, color='#4477aa', alpha=0.25, label='±1 sigma')
    ax.set_xlabel('time (s)')
    ax.set_ylabel('height relative to foot (m)')
    ax.set_title(title)
    ax.legend(fontsize='small')
    return save_svg(fig, path)


def saliency_bars(values, path, title='Saliency'):
    """values: (legs, N) saliency per history column, newest column at the right."""
    values = np.atleast_2d(values)
    fig, axes = plt.subplots(values.shape[0], 1, figsize=(8, 1.8 * values.shape[0]), sharex=True, squeeze=False)
    columns = np.arange(-values.shape[1], 0)
    for leg, ax in enumerate(axes[:, 0]):
        ax.bar(columns, values[leg], width=1.0, color='#ee6677')
        ax.set_ylabel(f'leg {leg}')
    axes[-1, 0].set_xlabel('history column (steps before now)')
    fig.suptitle(title)
    return save_svg(fig, path)


def heatmap(grid, x_values, y_values, path, xlabel, ylabel, title):
    fig, ax = plt.subplots(figsize=(6, 5))
    im = ax.imshow(np.asarray(grid).T, origin='lower', aspect='auto', vmin=0.0, vmax=1.0,
                   extent=(x_values[0], x_values[-1], y_values[0], y_values[-1]))
    fig.colorbar(im, ax=ax)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    return save_svg(fig, path)


def heightmap_image(heightmap, path):
    fig, ax = plt.subplots(figsize=(6, 5))
    x0, y0 = heightmap.origin
    x1, y1 = heightmap.upper
    im = ax.imshow(heightmap.elevation.T, origin='lower', extent=(x0, x1, y0, y1), cmap='terrain')
    fig.colorbar(im, ax=ax, label='z (m)')
    ax.set_title(heightmap.terrain_type.value)
    return save_svg(fig, path)
