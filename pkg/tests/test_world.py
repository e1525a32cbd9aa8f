import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evtrack.core import SeededRng
from evtrack.world import (NoPathError, OccupancyGrid, Scene,
                           SceneSamplingError, _rle_decode, _rle_encode,
                           generate_scene, load_scene, path_length,
                           random_navigable_point, raycast, save_scene,
                           segment_clear, shortest_path)

from conftest import empty_grid


def grid_with_wall():
    """10x10 m grid with a single occupied cell at (5.0..5.1, 5.0..5.1)."""
    cells = np.zeros((100, 100), dtype=bool)
    cells[50, 50] = True
    return OccupancyGrid(0.1, cells)


class TestOccupancyGrid:
    def test_border_forced_occupied(self):
        g = empty_grid(20, 20)
        assert g.cells[0].all() and g.cells[-1].all()
        assert g.cells[:, 0].all() and g.cells[:, -1].all()

    def test_cells_immutable(self):
        g = empty_grid(20, 20)
        with pytest.raises(ValueError):
            g.cells[5, 5] = True

    def test_occupied_at_out_of_bounds(self):
        g = empty_grid(20, 20)
        assert g.occupied_at(-1.0, 0.5)
        assert g.occupied_at(0.5, 99.0)

    def test_inflated_grows_obstacles(self):
        g = grid_with_wall()
        inf = g.inflated(0.3)
        assert inf.cells.sum() > g.cells.sum()
        assert inf.cells[50, 50]
        assert inf.cells[50, 53]  # 3 cells = 0.3 m away
        assert not inf.cells[50, 56]


class TestRaycast:
    def test_empty_grid_clear(self):
        g = empty_grid(100, 100)
        assert raycast(g, (1.0, 1.0), (9.0, 9.0)) is None

    def test_single_wall_hit_on_boundary(self):
        g = grid_with_wall()
        hit = raycast(g, (2.05, 5.05), (8.05, 5.05))
        assert hit is not None
        # cell spans x in [5.0, 5.1); the ray enters at its left face
        assert hit[0] == pytest.approx(5.0, abs=1e-9)
        assert hit[1] == pytest.approx(5.05, abs=1e-9)

    def test_origin_in_occupied_hits_immediately(self):
        g = grid_with_wall()
        assert raycast(g, (5.05, 5.05), (8.0, 8.0)) == (5.05, 5.05)

    def test_origin_outside_raises(self):
        g = empty_grid(20, 20)
        with pytest.raises(ValueError):
            raycast(g, (-1.0, 0.0), (1.0, 1.0))

    def test_verdicts_match_dense_sampling_oracle(self):
        rng = SeededRng(11)
        cells = rng.uniform(size=(60, 60)) < 0.08
        g = OccupancyGrid(0.1, cells)
        free = np.argwhere(~g.cells)
        for _ in range(100):
            iy, ix = free[int(rng.integers(0, len(free)))]
            a = ((ix + 0.5) * 0.1, (iy + 0.5) * 0.1)
            b = (float(rng.uniform(0.05, g.size_x - 0.05)),
                 float(rng.uniform(0.05, g.size_y - 0.05)))
            # oracle: sample the segment at 1 mm
            n = max(2, int(math.hypot(b[0] - a[0], b[1] - a[1]) / 0.001))
            ts = np.linspace(0.0, 1.0, n)
            oracle_blocked = any(
                g.occupied_at(a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]))
                for t in ts)
            got_blocked = raycast(g, a, b) is not None
            assert got_blocked == oracle_blocked

    def test_clear_symmetry(self):
        rng = SeededRng(12)
        cells = rng.uniform(size=(50, 50)) < 0.05
        g = OccupancyGrid(0.1, cells)
        free = np.argwhere(~g.cells)
        checked = 0
        for _ in range(300):
            (iy, ix), (jy, jx) = free[rng.integers(0, len(free), size=2)]
            a = ((ix + 0.5) * 0.1, (iy + 0.5) * 0.1)
            b = ((jx + 0.5) * 0.1, (jy + 0.5) * 0.1)
            if raycast(g, a, b) is None:
                assert raycast(g, b, a) is None
                checked += 1
        assert checked > 50


def bfs_grid_distance(grid, start, goal):
    """Independent 8-connected Dijkstra on cells (unit/sqrt2 costs)."""
    import heapq
    dist = {start: 0.0}
    pq = [(0.0, start)]
    while pq:
        d, node = heapq.heappop(pq)
        if node == goal:
            return d
        if d > dist.get(node, math.inf):
            continue
        x, y = node
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                if dx == 0 and dy == 0:
                    continue
                nx, ny = x + dx, y + dy
                if not (0 <= nx < grid.width and 0 <= ny < grid.height):
                    continue
                if grid.cells[ny, nx]:
                    continue
                if dx != 0 and dy != 0 and (grid.cells[y, nx] or grid.cells[ny, x]):
                    continue
                nd = d + (math.sqrt(2) if dx and dy else 1.0)
                if nd < dist.get((nx, ny), math.inf):
                    dist[(nx, ny)] = nd
                    heapq.heappush(pq, (nd, (nx, ny)))
    return math.inf


class TestShortestPath:
    def test_free_corridor_two_points(self):
        g = empty_grid(200, 60)
        path = shortest_path(g, (1.0, 3.0), (19.0, 3.0))
        assert len(path) == 2
        assert path_length(path) == pytest.approx(18.0, abs=0.2)

    def test_same_endpoint(self):
        g = empty_grid(60, 60)
        path = shortest_path(g, (3.0, 3.0), (3.0, 3.0))
        assert path == [(3.0, 3.0)]
        assert path_length(path) == 0.0

    def test_maze_matches_dijkstra_oracle(self):
        cells = np.zeros((80, 80), dtype=bool)
        cells[40, :60] = True   # wall with gap on the right
        g = OccupancyGrid(0.1, cells)
        a, b = (2.0, 2.0), (2.0, 6.0)
        path = shortest_path(g, a, b)
        inflated = g.inflated(0.3)
        oracle = bfs_grid_distance(inflated, inflated.cell_of(*a),
                                   inflated.cell_of(*b)) * 0.1
        assert path_length(path) <= oracle + math.sqrt(2) * 0.1 + 0.2
        assert path[0] == a and path[-1] == b

    def test_unreachable_raises(self):
        cells = np.zeros((60, 60), dtype=bool)
        cells[30, :] = True   # full wall, no gap
        g = OccupancyGrid(0.1, cells)
        with pytest.raises(NoPathError):
            shortest_path(g, (1.0, 1.0), (1.0, 5.0))

    def test_segments_raycast_clear_under_inflation(self):
        rng = SeededRng(21)
        scene = generate_scene("sp", rng, size_range=(10, 12), wall_range=(1, 2))
        inflated = scene.grid.inflated(0.3)
        for k in range(20):
            a = random_navigable_point(scene, rng.spawn(k))
            b = random_navigable_point(scene, rng.spawn(100 + k))
            try:
                path = shortest_path(scene.grid, a, b)
            except NoPathError:
                continue
            for p, q in zip(path, path[1:]):
                assert segment_clear(inflated, p, q)


class TestRandomNavigablePoint:
    def test_fully_free_scene_samples_navigable(self, empty_scene, rng):
        for _ in range(50):
            x, y = random_navigable_point(empty_scene, rng)
            assert not empty_scene.grid.inflated(0.3).occupied_at(x, y)

    def test_single_free_cell(self):
        cells = np.ones((20, 20), dtype=bool)
        cells[10, 10] = False
        g = OccupancyGrid(0.1, cells)
        scene = Scene(id="one", grid=g)
        p = random_navigable_point(scene, SeededRng(0), min_clearance=0.0)
        assert p == pytest.approx((1.05, 1.05))

    def test_no_eligible_cell_raises(self):
        cells = np.ones((10, 10), dtype=bool)
        scene = Scene(id="full", grid=OccupancyGrid(0.1, cells))
        with pytest.raises(SceneSamplingError):
            random_navigable_point(scene, SeededRng(0))

    def test_uniform_over_regions(self):
        # two free regions split by a wall; area ratio 1:3
        cells = np.ones((42, 82), dtype=bool)
        cells[1:41, 1:21] = False    # region A: 40 x 20
        cells[1:41, 22:82] = False   # region B: 40 x 60
        scene = Scene(id="two", grid=OccupancyGrid(0.1, cells))
        rng = SeededRng(31)
        in_a = 0
        n = 10_000
        for _ in range(n):
            x, _ = random_navigable_point(scene, rng, min_clearance=0.0)
            if x < 2.15:
                in_a += 1
        assert in_a / n == pytest.approx(20 / 80, abs=0.05 * (20 / 80) + 0.01)


class TestSceneGeneration:
    def test_sizes_in_range(self):
        for i in range(5):
            s = generate_scene(f"g{i}", SeededRng(i))
            assert 9.5 <= s.grid.size_x <= 20.5
            assert 9.5 <= s.grid.size_y <= 20.5

    def test_deterministic(self):
        a = generate_scene("d", SeededRng(5))
        b = generate_scene("d", SeededRng(5))
        assert np.array_equal(a.grid.cells, b.grid.cells)
        assert a.spawn_regions == b.spawn_regions


class TestSceneSerialization:
    def test_rle_round_trip(self):
        rng = SeededRng(41)
        cells = rng.uniform(size=(30, 40)) < 0.3
        g = OccupancyGrid(0.1, cells)
        decoded = _rle_decode(_rle_encode(g.cells), 40, 30)
        assert np.array_equal(decoded, g.cells)

    def test_save_load_round_trip(self, tmp_path, small_scene):
        path = tmp_path / "scene.json"
        save_scene(small_scene, path)
        loaded = load_scene(path)
        assert loaded.id == small_scene.id
        assert loaded.grid.resolution == small_scene.grid.resolution
        assert np.array_equal(loaded.grid.cells, small_scene.grid.cells)
        assert loaded.spawn_regions == [tuple(r) for r in small_scene.spawn_regions]

    def test_missing_field_raises(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"id": "x", "resolution": 0.1}')
        with pytest.raises(ValueError, match="width"):
            load_scene(path)
