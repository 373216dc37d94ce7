"""
Procedural terrain: gradient-noise hills, random steps, stairs, friction
draws and heightmap queries (height, 9-point scan, normal, penetration).
"""
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from utils.validators import Validator

SQRT_HALF = math.sqrt(0.5)
SCAN_RADIUS = 0.10
SCAN_ANGLES = np.arange(8) * (math.pi / 4.0)


class TerrainType(str, Enum):
    FLAT = 'flat'
    HILLS = 'hills'
    SLIPPERY_HILLS = 'slippery_hills'
    STEPS = 'steps'
    STAIRS = 'stairs'

    @property
    def is_hills(self):
        return self in (TerrainType.HILLS, TerrainType.SLIPPERY_HILLS)


@dataclass(frozen=True)
class ParameterSpace:
    """Bounded box of terrain parameters, discretized into `levels` values per dimension."""
    names: tuple
    lows: tuple
    highs: tuple
    easy_high: tuple  # True where the upper bound is the easy end

    @property
    def dim(self):
        return len(self.names)

    def grid(self, levels):
        return [np.linspace(lo, hi, levels) for lo, hi in zip(self.lows, self.highs)]

    def values(self, indices, levels):
        grid = self.grid(levels)
        return tuple(float(grid[d][int(i)]) for d, i in enumerate(indices))

    def easiest(self, levels):
        return tuple(levels - 1 if high else 0 for high in self.easy_high)


PARAMETER_SPACES = {
    TerrainType.FLAT: ParameterSpace((), (), (), ()),
    TerrainType.HILLS: ParameterSpace(
        ('roughness', 'frequency', 'amplitude'), (0.0, 0.2, 0.2), (0.05, 1.0, 3.0), (False, False, False)),
    TerrainType.SLIPPERY_HILLS: ParameterSpace(
        ('roughness', 'frequency', 'amplitude'), (0.0, 0.2, 0.2), (0.05, 1.0, 3.0), (False, False, False)),
    TerrainType.STEPS: ParameterSpace(('width', 'height'), (0.1, 0.05), (0.5, 0.3), (True, False)),
    TerrainType.STAIRS: ParameterSpace(('width', 'height'), (0.1, 0.02), (0.5, 0.2), (True, False)),
}


@dataclass(frozen=True)
class TerrainParams:
    terrain_type: TerrainType
    values: tuple = ()
    seed: int = 0

    def as_dict(self):
        names = PARAMETER_SPACES[self.terrain_type].names
        return dict(zip(names, self.values))


@dataclass(frozen=True)
class FrictionField:
    """Terrain-wide friction coefficient."""
    mu: float


@dataclass(frozen=True)
class Heightmap:
    """Elevation grid; elevation[i, j] sits at (x0 + i * spacing, y0 + j * spacing)."""
    origin: tuple
    spacing: float
    elevation: np.ndarray
    smooth: bool = True
    terrain_type: TerrainType = TerrainType.FLAT

    def __post_init__(self):
        self.elevation.setflags(write=False)

    @property
    def shape(self):
        return self.elevation.shape

    @property
    def upper(self):
        nx, ny = self.elevation.shape
        return (self.origin[0] + (nx - 1) * self.spacing, self.origin[1] + (ny - 1) * self.spacing)

    @property
    def extent(self):
        (x0, y0), (x1, y1) = self.origin, self.upper
        return x1 - x0, y1 - y0

    def node(self, i, j):
        return self.origin[0] + i * self.spacing, self.origin[1] + j * self.spacing


class GradientNoise:
    """Single-octave lattice gradient noise with unit gradients; |value| <= sqrt(0.5)."""

    def __init__(self, rng, pitch, origin, extent):
        self.pitch = pitch
        self.origin = origin
        n = int(math.ceil(extent / pitch)) + 2
        angles = rng.uniform(0.0, 2.0 * math.pi, size=(n, n))
        self.gradients = np.stack([np.cos(angles), np.sin(angles)], axis=-1)

    @staticmethod
    def fade(t):
        return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)

    def __call__(self, x, y):
        u = (np.asarray(x) - self.origin[0]) / self.pitch
        v = (np.asarray(y) - self.origin[1]) / self.pitch
        i = np.floor(u).astype(int)
        j = np.floor(v).astype(int)
        fx, fy = u - i, v - j

        def corner(di, dj):
            g = self.gradients[i + di, j + dj]
            return g[..., 0] * (fx - di) + g[..., 1] * (fy - dj)

        sx, sy = self.fade(fx), self.fade(fy)
        bottom = corner(0, 0) + sx * (corner(1, 0) - corner(0, 0))
        top = corner(0, 1) + sx * (corner(1, 1) - corner(0, 1))
        return bottom + sy * (top - bottom)


def _grid(extent, spacing):
    n = int(round(extent / spacing)) + 1
    half = (n - 1) * spacing / 2.0
    axis = -half + spacing * np.arange(n)
    return axis, (-half, -half)


def generate(params, terrain_config):
    """
    Generate a heightmap and friction field.

    Args:
        params: TerrainParams
        terrain_config: TerrainConfig section

    Returns:
        tuple: (Heightmap, FrictionField), bit-identical for equal (params, seed)

    Raises:
        ValidationError: If a parameter lies outside its range
    """
    Validator.validate_terrain_params(params, PARAMETER_SPACES)
    rng = np.random.default_rng(params.seed)
    kind = TerrainType(params.terrain_type)
    extent = terrain_config.extent

    if kind is TerrainType.FLAT:
        axis, origin = _grid(extent, terrain_config.hills_spacing)
        elevation = np.zeros((axis.size, axis.size))
        hm = Heightmap(origin, terrain_config.hills_spacing, elevation, True, kind)
    elif kind.is_hills:
        roughness, frequency, amplitude = params.values
        axis, origin = _grid(extent, terrain_config.hills_spacing)
        xs, ys = np.meshgrid(axis, axis, indexing='ij')
        noise = GradientNoise(rng, 1.0 / frequency, origin, extent)
        elevation = amplitude * np.clip(noise(xs, ys) / SQRT_HALF, -1.0, 1.0)
        elevation = elevation + rng.uniform(-roughness, roughness, size=elevation.shape)
        hm = Heightmap(origin, terrain_config.hills_spacing, elevation, True, kind)
    elif kind is TerrainType.STEPS:
        width, height = params.values
        axis, origin = _grid(extent, terrain_config.block_spacing)
        cells = block_cells(width, terrain_config.block_spacing)
        bi = np.arange(axis.size) // cells
        n_blocks = int(bi[-1]) + 1
        blocks = rng.uniform(0.0, height, size=(n_blocks, n_blocks))
        elevation = blocks[np.ix_(bi, bi)]
        hm = Heightmap(origin, terrain_config.block_spacing, elevation, False, kind)
    else:
        width, height = params.values
        axis, origin = _grid(extent, terrain_config.block_spacing)
        elevation_x = stair_profile(axis, width, height, terrain_config.stairs_flat_length)
        elevation = np.repeat(elevation_x[:, None], axis.size, axis=1)
        hm = Heightmap(origin, terrain_config.block_spacing, elevation, False, kind)

    return hm, FrictionField(sample_friction(kind, rng, terrain_config))


def block_cells(width, spacing):
    """Block width as a whole number of grid cells, so every edge sits on the grid."""
    return max(1, int(round(width / spacing)))


def stair_profile(x, width, height, flat_length):
    """Treads rising by `height` every `width` on both sides of a flat middle segment."""
    distance = np.abs(x) - flat_length / 2.0
    steps = np.where(distance < 0.0, 0, np.floor(np.maximum(distance, 0.0) / width) + 1)
    return steps * height


def sample_friction(terrain_type, rng, terrain_config):
    """Clipped Gaussian friction draw for a terrain type."""
    if TerrainType(terrain_type) is TerrainType.SLIPPERY_HILLS:
        mean, std = terrain_config.slippery_friction_mean, terrain_config.slippery_friction_std
    else:
        mean, std = terrain_config.friction_mean, terrain_config.friction_std
    return float(max(rng.normal(mean, std), terrain_config.friction_min))


def plane_map(gx, gy, extent=10.0, spacing=0.2):
    """Planar terrain z = gx * x + gy * y."""
    axis, origin = _grid(extent, spacing)
    xs, ys = np.meshgrid(axis, axis, indexing='ij')
    return Heightmap(origin, spacing, gx * xs + gy * ys, True, TerrainType.HILLS)


def step_map(height, distance, extent=10.0, spacing=0.02):
    """Flat ground with a single step of `height` for x >= distance."""
    axis, origin = _grid(extent, spacing)
    profile = np.where(axis >= distance - spacing / 2.0, height, 0.0)
    return Heightmap(origin, spacing, np.repeat(profile[:, None], axis.size, axis=1), False, TerrainType.STEPS)


def height_at(hm, x, y, return_flag=False):
    """
    Terrain elevation at (x, y).

    Bilinear on smooth maps, nearest cell on block maps. Queries outside the
    grid are clamped to its border; `return_flag` also returns where that happened.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    nx, ny = hm.elevation.shape
    u = (x - hm.origin[0]) / hm.spacing
    v = (y - hm.origin[1]) / hm.spacing
    outside = (u < 0) | (u > nx - 1) | (v < 0) | (v > ny - 1)
    u = np.clip(u, 0.0, nx - 1)
    v = np.clip(v, 0.0, ny - 1)

    if hm.smooth:
        i = np.minimum(np.floor(u).astype(int), nx - 2)
        j = np.minimum(np.floor(v).astype(int), ny - 2)
        tu, tv = u - i, v - j
        e = hm.elevation
        h = ((1 - tu) * (1 - tv) * e[i, j] + tu * (1 - tv) * e[i + 1, j]
             + (1 - tu) * tv * e[i, j + 1] + tu * tv * e[i + 1, j + 1])
    else:
        i = np.clip(np.floor(u + 0.5).astype(int), 0, nx - 1)
        j = np.clip(np.floor(v + 0.5).astype(int), 0, ny - 1)
        h = hm.elevation[i, j]

    h = float(h) if np.ndim(h) == 0 else h
    if return_flag:
        return h, (bool(outside) if np.ndim(outside) == 0 else outside)
    return h


def scan_points(feet_xy):
    """(..., 2) foot positions -> (..., 9, 2) scan points: center then 8 on the circle."""
    feet_xy = np.asarray(feet_xy, dtype=float)
    ring = SCAN_RADIUS * np.stack([np.cos(SCAN_ANGLES), np.sin(SCAN_ANGLES)], axis=-1)
    offsets = np.vstack([np.zeros((1, 2)), ring])
    return feet_xy[..., None, :] + offsets


def height_scan(hm, foot_position):
    """Nine elevations around a foot (or (4, 9) for four feet)."""
    points = scan_points(np.asarray(foot_position, dtype=float)[..., :2])
    return height_at(hm, points[..., 0], points[..., 1])


def terrain_normal(hm, x, y):
    """Unit normal from central-difference tangents."""
    e = hm.spacing
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    gx = (height_at(hm, x + e, y) - height_at(hm, x - e, y)) / (2.0 * e)
    gy = (height_at(hm, x, y + e) - height_at(hm, x, y - e)) / (2.0 * e)
    n = np.stack([-np.asarray(gx), -np.asarray(gy), np.ones_like(np.asarray(gx, dtype=float))], axis=-1)
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def penetration(hm, points, radius=0.0):
    """
    Penetration depth and contact normal of spheres against the terrain.

    Args:
        hm: Heightmap
        points: (P, 3) sphere centers
        radius: Sphere radius, scalar or (P,)

    Returns:
        tuple: depth (P,), positive when penetrating; unit normals (P, 3)
    """
    points = np.asarray(points, dtype=float)
    radius = np.broadcast_to(np.asarray(radius, dtype=float), points.shape[:1])
    x, y, z = points[:, 0], points[:, 1], points[:, 2] - radius
    h = height_at(hm, x, y)

    if hm.smooth:
        normal = terrain_normal(hm, x, y)
        return (h - z) * normal[:, 2], normal

    # block maps: vertical depth, or distance to the edge of a lower neighbouring cell
    s = hm.spacing
    nx, ny = hm.elevation.shape
    i = np.clip(np.floor((x - hm.origin[0]) / s + 0.5).astype(int), 0, nx - 1)
    j = np.clip(np.floor((y - hm.origin[1]) / s + 0.5).astype(int), 0, ny - 1)
    cx = hm.origin[0] + i * s
    cy = hm.origin[1] + j * s

    depth = h - z
    normal = np.tile([0.0, 0.0, 1.0], (points.shape[0], 1))
    neighbours = (
        (1, 0, cx + s / 2 - x, np.array([1.0, 0.0, 0.0])),
        (-1, 0, x - (cx - s / 2), np.array([-1.0, 0.0, 0.0])),
        (0, 1, cy + s / 2 - y, np.array([0.0, 1.0, 0.0])),
        (0, -1, y - (cy - s / 2), np.array([0.0, -1.0, 0.0])),
    )
    for di, dj, dist, direction in neighbours:
        ni = np.clip(i + di, 0, nx - 1)
        nj = np.clip(j + dj, 0, ny - 1)
        lower = (hm.elevation[ni, nj] <= z) & ((ni != i) | (nj != j))
        better = lower & (depth > 0) & (dist < depth)
        depth = np.where(better, dist, depth)
        normal[better] = direction
    return depth, normal
