"""
Input validation utilities.
"""
import numpy as np

from utils.errors import ShapeError, ValidationError

RANGE_TOLERANCE = 1e-9


class Validator:
    """Domain validation helper."""

    @staticmethod
    def validate_terrain_params(params, spaces):
        """
        Validate a terrain parameter vector against its parameter space.

        Args:
            params: TerrainParams
            spaces: Mapping terrain type -> ParameterSpace

        Returns:
            TerrainParams: The validated params

        Raises:
            ValidationError: If the type is unknown, the vector has the wrong
                length or a value lies outside its range
        """
        space = spaces.get(params.terrain_type)
        if space is None:
            raise ValidationError(f'Unknown terrain type {params.terrain_type!r}')
        if len(params.values) != space.dim:
            raise ValidationError(
                f'{params.terrain_type.value} expects {space.dim} parameters, got {len(params.values)}',
                payload={'names': list(space.names)})
        for name, value, lo, hi in zip(space.names, params.values, space.lows, space.highs):
            if not (lo - RANGE_TOLERANCE <= value <= hi + RANGE_TOLERANCE):
                raise ValidationError(
                    f'{name} = {value} outside [{lo}, {hi}]',
                    payload={'parameter': name, 'value': value, 'range': [lo, hi]})
        return params

    @staticmethod
    def validate_dimension(array, expected, name='input'):
        """
        Validate the trailing dimension of an array.

        Returns:
            np.ndarray: The array as float

        Raises:
            ShapeError: If the trailing dimension differs
        """
        array = np.asarray(array, dtype=float)
        if array.ndim == 0 or array.shape[-1] != expected:
            raise ShapeError(f'{name} must have trailing dimension {expected}, got shape {array.shape}')
        return array

    @staticmethod
    def validate_probability(value, name):
        """Validate a probability in [0, 1]."""
        if not 0.0 <= value <= 1.0:
            raise ValidationError(f'{name} must lie in [0, 1]', payload={name: value})
        return value

    @staticmethod
    def validate_seed(seed):
        """
        Validate an unsigned 64-bit seed.

        Raises:
            ValidationError: If the seed is not an integer in [0, 2**64)
        """
        try:
            seed = int(seed)
        except (TypeError, ValueError):
            raise ValidationError('Seed must be an integer', payload={'flag': '--seed'})
        if not 0 <= seed < 2 ** 64:
            raise ValidationError('Seed must lie in [0, 2**64)', payload={'flag': '--seed'})
        return seed

    @staticmethod
    def validate_history_length(length):
        """Validate a student history length."""
        if int(length) < 1:
            raise ValidationError('History length must be >= 1', payload={'history_length': length})
        return int(length)

    @staticmethod
    def validate_finite(array, name):
        """Validate that every entry is finite."""
        array = np.asarray(array, dtype=float)
        if not np.all(np.isfinite(array)):
            raise ValidationError(f'{name} must be finite')
        return array
