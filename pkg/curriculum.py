"""
Adaptive terrain curriculum: traversability estimates and a sequential
importance resampling filter over discretized terrain parameters.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from terrain import PARAMETER_SPACES, TerrainParams, TerrainType
from utils.errors import EmptyTrajectoryError, ValidationError
from utils.validators import Validator

logger = logging.getLogger(__name__)

SEED_BOUND = 2 ** 63


def traversability(labels):
    """
    Empirical traversability of one trajectory: the mean of its labels.

    Raises:
        EmptyTrajectoryError: If there are no labels
    """
    labels = np.asarray(labels, dtype=float)
    if labels.size == 0:
        raise EmptyTrajectoryError('Cannot estimate traversability of an empty trajectory')
    return float(labels.mean())


def measurement_probability(tr_values, band=(0.5, 0.9)):
    """Fraction of trajectories whose traversability lies inside `band` (inclusive)."""
    values = np.asarray(tr_values, dtype=float)
    if values.size == 0:
        return 0.0
    low, high = band
    return float(np.count_nonzero((values >= low) & (values <= high)) / values.size)


def normalize_weights(weights):
    """Weights divided by their sum; all-zero input returns None."""
    weights = np.asarray(weights, dtype=float)
    total = weights.sum()
    if not np.isfinite(total) or total <= 0.0:
        return None
    return weights / total


def resample(indices, weights, rng, memory=None):
    """
    Multinomial resampling of particle grid indices.

    Args:
        indices: (n, d) int grid indices
        weights: (n,) importance weights
        rng: numpy Generator
        memory: (m, d) replay memory used when every weight is zero

    Returns:
        np.ndarray: (n, d) resampled indices
    """
    indices = np.asarray(indices, dtype=int)
    n = indices.shape[0]
    normalized = normalize_weights(weights)
    if normalized is None:
        pool = indices if memory is None or len(memory) == 0 else np.vstack([indices, memory])
        logger.debug('All weights zero, resampling uniformly', extra={'extra_fields': {'pool': len(pool)}})
        return pool[rng.integers(0, len(pool), size=n)].copy()
    return indices[rng.choice(n, size=n, p=normalized)].copy()


def transition(indices, rng, p_transition, levels):
    """
    Random walk on the grid: every coordinate moves to a neighbouring level with
    probability `p_transition`, direction uniform, reflecting at the bounds.
    """
    indices = np.asarray(indices, dtype=int).copy()
    if indices.size == 0:
        return indices
    move = rng.random(indices.shape) < p_transition
    step = np.where(rng.random(indices.shape) < 0.5, -1, 1)
    moved = indices + step
    moved = np.where(moved < 0, 1, moved)
    moved = np.where(moved > levels - 1, levels - 2, moved)
    if levels == 1:
        moved = np.zeros_like(moved)
    return np.where(move, moved, indices)


def replay_mix(indices, memory, rng, p_replay):
    """Replace each particle with a uniform draw from `memory` with probability `p_replay`."""
    indices = np.asarray(indices, dtype=int).copy()
    if memory is None or len(memory) == 0:
        return indices
    memory = np.asarray(memory, dtype=int)
    replace = rng.random(indices.shape[0]) < p_replay
    picks = memory[rng.integers(0, len(memory), size=indices.shape[0])]
    indices[replace] = picks[replace]
    return indices


def initial_indices(space, n_particle, levels, init, rng):
    if init == 'uniform':
        return rng.integers(0, levels, size=(n_particle, space.dim))
    return np.tile(np.array(space.easiest(levels), dtype=int), (n_particle, 1)).reshape(n_particle, space.dim)


@dataclass
class ParticleSet:
    """Particles of one terrain type."""
    terrain_type: TerrainType
    indices: np.ndarray               # (n, d) grid indices
    weights: np.ndarray               # (n,)
    levels: int
    memory: np.ndarray                # (m, d) replay memory, append-only
    tr_values: list = field(default_factory=list)  # per particle: Tr values since the last update

    @classmethod
    def create(cls, terrain_type, n_particle, levels, init, rng):
        space = PARAMETER_SPACES[TerrainType(terrain_type)]
        indices = initial_indices(space, n_particle, levels, init, rng)
        return cls(TerrainType(terrain_type), indices, np.full(n_particle, 1.0 / n_particle), levels,
                   np.zeros((0, space.dim), dtype=int), [[] for _ in range(n_particle)])

    @property
    def space(self):
        return PARAMETER_SPACES[self.terrain_type]

    def __len__(self):
        return self.indices.shape[0]

    def values(self, k):
        return self.space.values(self.indices[k], self.levels)

    def terrain(self, k, seed):
        return TerrainParams(self.terrain_type, self.values(k), int(seed))

    def record(self, k, tr):
        self.tr_values[k].append(float(tr))


@dataclass
class CurriculumState:
    """Particle sets per terrain type plus the update counter."""
    sets: dict
    iteration: int = 0

    @classmethod
    def create(cls, curriculum_config, rng):
        sets = {}
        for name in curriculum_config.terrain_types:
            kind = TerrainType(name)
            sets[kind] = ParticleSet.create(kind, curriculum_config.n_particle, curriculum_config.levels,
                                            curriculum_config.init, rng)
        return cls(sets)

    def slots(self):
        return [(kind, k) for kind, particles in self.sets.items() for k in range(len(particles))]

    def allocate(self, n_episodes, rng):
        """
        Terrain slots for `n_episodes` episodes: round-robin over every
        (type, particle) pair from a random offset, so each particle gets
        trajectories even when the batch is small.
        """
        slots = self.slots()
        start = int(rng.integers(0, len(slots)))
        return [slots[(start + i) % len(slots)] for i in range(n_episodes)]

    def terrain(self, slot, rng):
        """TerrainParams for a slot with a fresh terrain seed."""
        kind, k = slot
        return self.sets[kind].terrain(k, rng.integers(0, SEED_BOUND))

    def record(self, slot, tr):
        kind, k = slot
        self.sets[kind].record(k, tr)

    def summary(self):
        """Mean parameter values and weights per terrain type."""
        out = {}
        for kind, particles in self.sets.items():
            values = np.array([particles.values(k) for k in range(len(particles))]) if particles.space.dim else None
            out[kind.value] = {
                'mean': dict(zip(particles.space.names, values.mean(axis=0).tolist())) if values is not None else {},
                'memory': int(len(particles.memory)),
            }
        return out


def update_particle_set(particles, rng, p_transition, p_replay, band):
    """Weights from measurement probabilities, resample, append to replay, replay mix, transition."""
    probabilities = np.array([measurement_probability(tr, band) for tr in particles.tr_values])
    normalized = normalize_weights(probabilities)
    weights = np.full(len(particles), 1.0 / len(particles)) if normalized is None else normalized

    resampled = resample(particles.indices, probabilities, rng, particles.memory)
    memory = np.vstack([particles.memory, resampled])
    mixed = replay_mix(resampled, memory, rng, p_replay)
    moved = transition(mixed, rng, p_transition, particles.levels)

    n = len(particles)
    return ParticleSet(particles.terrain_type, moved, np.full(n, 1.0 / n), particles.levels, memory,
                       [[] for _ in range(n)]), weights, probabilities


def curriculum_update(state, curriculum_config, rng, tr_values=None):
    """
    One curriculum update over every terrain type.

    Args:
        state: CurriculumState
        curriculum_config: CurriculumConfig section
        rng: numpy Generator
        tr_values: Optional mapping terrain type -> per-particle Tr lists; defaults to those recorded

    Returns:
        tuple: (new CurriculumState, per-type log rows)
    """
    Validator.validate_probability(curriculum_config.p_transition, 'p_transition')
    Validator.validate_probability(curriculum_config.p_replay, 'p_replay')
    rows = []
    sets = {}
    for kind, particles in state.sets.items():
        if tr_values is not None:
            values = tr_values[kind]
            if len(values) != len(particles):
                raise ValidationError('Traversability values must cover every particle',
                                      payload={'terrain': kind.value})
            particles = ParticleSet(kind, particles.indices, particles.weights, particles.levels,
                                    particles.memory, [list(v) for v in values])
        updated, weights, probabilities = update_particle_set(
            particles, rng, curriculum_config.p_transition, curriculum_config.p_replay, curriculum_config.band)
        sets[kind] = updated
        for k in range(len(particles)):
            rows.append({
                'iteration': state.iteration + 1,
                'terrain': kind.value,
                'particle': k,
                'parameters': particles.values(k),
                'tr_mean': float(np.mean(particles.tr_values[k])) if particles.tr_values[k] else float('nan'),
                'probability': float(probabilities[k]),
                'weight': float(weights[k]),
            })
    new_state = CurriculumState(sets, state.iteration + 1)
    logger.info('Curriculum updated', extra={'extra_fields': {'iteration': new_state.iteration,
                                                               'summary': new_state.summary()}})
    return new_state, rows


def uniform_terrain(terrain_types, levels, rng):
    """Terrain drawn uniformly over types and grid points (curriculum disabled)."""
    kinds = [TerrainType(t) for t in terrain_types]
    kind = kinds[int(rng.integers(0, len(kinds)))]
    space = PARAMETER_SPACES[kind]
    indices = rng.integers(0, levels, size=space.dim)
    return TerrainParams(kind, space.values(indices, levels), int(rng.integers(0, SEED_BOUND)))
