from __future__ import annotations

import math

import numpy as np
import pytest
from scipy import stats

from terrain import (
    TerrainParams,
    TerrainType,
    generate,
    height_at,
    height_scan,
    plane_map,
    sample_friction,
    step_map,
    terrain_normal,
)
from utils.errors import ValidationError
from utils.reports import read_heightmap, write_heightmap


def test_same_seed_gives_identical_terrain(terrain_config):
    params = TerrainParams(TerrainType.HILLS, (0.02, 0.6, 1.5), seed=7)
    first, mu_first = generate(params, terrain_config)
    second, mu_second = generate(params, terrain_config)
    assert np.array_equal(first.elevation, second.elevation)
    assert mu_first == mu_second


def test_different_seeds_differ(terrain_config):
    a, _ = generate(TerrainParams(TerrainType.HILLS, (0.02, 0.6, 1.5), seed=1), terrain_config)
    b, _ = generate(TerrainParams(TerrainType.HILLS, (0.02, 0.6, 1.5), seed=2), terrain_config)
    assert not np.array_equal(a.elevation, b.elevation)


def test_smooth_hills_stay_within_amplitude(terrain_config):
    hm, _ = generate(TerrainParams(TerrainType.HILLS, (0.0, 0.5, 0.2), seed=3), terrain_config)
    assert np.max(np.abs(hm.elevation)) <= 0.2


def test_step_blocks_stay_below_height(terrain_config):
    hm, _ = generate(TerrainParams(TerrainType.STEPS, (0.3, 0.05), seed=3), terrain_config)
    assert hm.elevation.min() >= 0.0
    assert hm.elevation.max() <= 0.05
    assert not hm.smooth


@pytest.mark.parametrize('width', [0.31, 0.15, 0.3])
def test_step_block_edges_sit_on_the_grid(terrain_config, width):
    hm, _ = generate(TerrainParams(TerrainType.STEPS, (width, 0.2), seed=5), terrain_config)
    cells = round(width / terrain_config.block_spacing)
    for profile in (hm.elevation[:, 7], hm.elevation[12, :]):
        edges = np.flatnonzero(np.diff(profile)) + 1
        assert edges.size > 0
        assert np.all(edges % cells == 0)


def test_stair_treads_differ_by_step_height(terrain_config):
    hm, _ = generate(TerrainParams(TerrainType.STAIRS, (0.3, 0.1), seed=3), terrain_config)
    diffs = np.abs(np.diff(hm.elevation[:, 0]))
    changes = diffs[diffs > 1e-9]
    assert changes.size > 0
    assert np.allclose(changes, 0.1)


@pytest.mark.parametrize('params', [
    TerrainParams(TerrainType.HILLS, (0.1, 0.6, 1.5)),
    TerrainParams(TerrainType.STEPS, (0.3,)),
    TerrainParams(TerrainType.STAIRS, (0.3, 0.5)),
])
def test_invalid_parameters_are_rejected(params, terrain_config):
    with pytest.raises(ValidationError):
        generate(params, terrain_config)


def test_grid_node_and_cell_midpoint_queries(terrain_config):
    hm, _ = generate(TerrainParams(TerrainType.HILLS, (0.02, 0.6, 1.5), seed=5), terrain_config)
    x, y = hm.node(20, 30)
    assert height_at(hm, x, y) == pytest.approx(hm.elevation[20, 30], abs=1e-12)
    mid = height_at(hm, x + hm.spacing / 2, y + hm.spacing / 2)
    assert mid == pytest.approx(hm.elevation[20:22, 30:32].mean(), abs=1e-12)


def test_block_query_across_boundary_reads_neighbour():
    hm = step_map(0.2, 1.0)
    assert height_at(hm, 0.985, 0.0) == 0.0
    assert height_at(hm, 1.005, 0.0) == 0.2


def test_out_of_grid_query_is_clamped_and_flagged():
    hm = plane_map(0.1, 0.0)
    inside, inside_flag = height_at(hm, 4.0, 0.0, return_flag=True)
    outside, outside_flag = height_at(hm, 50.0, 0.0, return_flag=True)
    assert not inside_flag and outside_flag
    assert outside == pytest.approx(0.1 * hm.upper[0])
    assert inside == pytest.approx(0.4)


def test_flat_scan_is_zero(terrain_config):
    hm, _ = generate(TerrainParams(TerrainType.FLAT, ()), terrain_config)
    assert np.array_equal(height_scan(hm, np.array([0.3, -0.2, 0.0])), np.zeros(9))


def test_scan_reproduces_a_plane():
    hm = plane_map(0.3, 0.0)
    scan = height_scan(hm, np.array([0.5, 0.5, 0.0]))
    assert scan[0] == pytest.approx(0.15)
    assert scan.max() - scan.min() == pytest.approx(0.2 * 0.3, abs=1e-12)


def test_scan_in_front_of_a_step_edge():
    hm = step_map(0.2, 1.0)
    scan = height_scan(hm, np.array([0.95, 0.0, 0.0]))
    assert scan[0] == 0.0
    assert scan[1] == 0.2   # straight ahead
    assert scan[5] == 0.0   # straight behind


def test_normals_of_flat_and_inclined_planes():
    assert np.allclose(terrain_normal(plane_map(0.0, 0.0), 0.3, 0.1), [0.0, 0.0, 1.0])
    half = math.sqrt(0.5)
    assert np.allclose(terrain_normal(plane_map(1.0, 0.0), 0.3, 0.1), [-half, 0.0, half])


def test_slippery_friction_draws_are_clipped(terrain_config):
    rng = np.random.default_rng(0)
    n = 100_000
    draws = np.array([sample_friction(TerrainType.SLIPPERY_HILLS, rng, terrain_config) for _ in range(n)])
    mu, sigma = terrain_config.slippery_friction_mean, terrain_config.slippery_friction_std
    floor = terrain_config.friction_min
    assert draws.min() == floor

    # max(X, floor) for X ~ N(mu, sigma)
    alpha = (floor - mu) / sigma
    at_floor = stats.norm.cdf(alpha)
    expected = floor * at_floor + mu * (1.0 - at_floor) + sigma * stats.norm.pdf(alpha)
    assert abs(draws.mean() - expected) < 4.0 * draws.std() / math.sqrt(n)
    assert abs(np.mean(draws == floor) - at_floor) < 4.0 * math.sqrt(at_floor * (1.0 - at_floor) / n)


def test_heightmap_csv_header_and_grid(tmp_path, terrain_config):
    params = TerrainParams(TerrainType.STEPS, (0.3, 0.1), seed=11)
    hm, _ = generate(params, terrain_config)
    path = write_heightmap(tmp_path / 'steps.csv', hm, params)

    lines = path.read_text().splitlines()
    assert lines[0].startswith('# type=steps width=0.3 height=0.1 seed=11')
    assert lines[1].startswith('# spacing=')
    assert lines[2].startswith('# extent')

    header, elevation = read_heightmap(path)
    assert header['type'] == 'steps'
    assert int(header['nx']) == hm.shape[0] and int(header['ny']) == hm.shape[1]
    assert float(header['spacing']) == hm.spacing
    assert np.array_equal(elevation, hm.elevation)
