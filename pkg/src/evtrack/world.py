"""Static scenes: occupancy grids, ray casting, shortest paths, sampling.

Scenes are procedurally generated rooms with internal walls and doorways,
standing in for real indoor scans. Grids are immutable after construction.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .core import SeededRng

DEFAULT_RESOLUTION = 0.1   # m / cell
AGENT_RADIUS = 0.3         # m, used as default planning clearance

SQRT2 = math.sqrt(2.0)


class NoPathError(Exception):
    pass


class SceneSamplingError(Exception):
    pass


class OccupancyGrid:
    """Binary occupancy grid. cells[iy, ix] is True when occupied.

    World frame: x in [0, width*res), y in [0, height*res); the border ring
    of cells is always occupied (closed world).
    """

    def __init__(self, resolution: float, cells: np.ndarray):
        if resolution <= 0:
            raise ValueError("resolution must be > 0")
        cells = np.asarray(cells, dtype=bool).copy()
        cells[0, :] = cells[-1, :] = True
        cells[:, 0] = cells[:, -1] = True
        cells.setflags(write=False)
        self.resolution = float(resolution)
        self.cells = cells
        self.height, self.width = cells.shape

    @property
    def size_x(self) -> float:
        return self.width * self.resolution

    @property
    def size_y(self) -> float:
        return self.height * self.resolution

    def cell_of(self, x: float, y: float):
        ix = int(x / self.resolution)
        iy = int(y / self.resolution)
        return ix, iy

    def in_bounds(self, x: float, y: float) -> bool:
        return 0.0 <= x < self.size_x and 0.0 <= y < self.size_y

    def occupied_at(self, x: float, y: float) -> bool:
        if not self.in_bounds(x, y):
            return True
        ix, iy = self.cell_of(x, y)
        return bool(self.cells[iy, ix])

    def inflated(self, clearance: float) -> "OccupancyGrid":
        """Dilate occupied cells by a disk of the given radius (in meters)."""
        r = int(math.ceil(clearance / self.resolution))
        if r <= 0:
            return self
        occ = self.cells
        out = occ.copy()
        yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
        disk = (xx * xx + yy * yy) <= r * r
        offsets = [(int(dy), int(dx)) for dy, dx in zip(*np.nonzero(disk))]
        h, w = occ.shape
        for dy, dx in offsets:
            dy -= r
            dx -= r
            src = occ[max(0, -dy):h - max(0, dy), max(0, -dx):w - max(0, dx)]
            out[max(0, dy):h - max(0, -dy), max(0, dx):w - max(0, -dx)] |= src
        return OccupancyGrid(self.resolution, out)


def raycast(grid: OccupancyGrid, frm, to):
    """Walk the segment frm->to through the grid (Amanatides-Woo traversal).

    Returns None when no occupied cell is intersected, otherwise the (x, y)
    point where the segment first enters an occupied cell. Starting inside an
    occupied cell hits immediately at frm.
    """
    x0, y0 = float(frm[0]), float(frm[1])
    x1, y1 = float(to[0]), float(to[1])
    if not grid.in_bounds(x0, y0):
        raise ValueError(f"raycast origin {frm} outside grid")
    res = grid.resolution
    ix, iy = grid.cell_of(x0, y0)
    if grid.cells[iy, ix]:
        return (x0, y0)
    dx, dy = x1 - x0, y1 - y0
    seg_len = math.hypot(dx, dy)
    if seg_len == 0.0:
        return None
    step_x = 1 if dx > 0 else (-1 if dx < 0 else 0)
    step_y = 1 if dy > 0 else (-1 if dy < 0 else 0)

    def t_to_boundary(coord, i, d, step):
        if step == 0:
            return math.inf
        edge = (i + (1 if step > 0 else 0)) * res
        return (edge - coord) / d

    t_max_x = t_to_boundary(x0, ix, dx, step_x)
    t_max_y = t_to_boundary(y0, iy, dy, step_y)
    t_delta_x = abs(res / dx) if dx != 0 else math.inf
    t_delta_y = abs(res / dy) if dy != 0 else math.inf

    t = 0.0
    while True:
        tie = abs(t_max_x - t_max_y) <= 1e-12 * max(1.0, abs(t_max_x))
        if tie and step_x != 0 and step_y != 0:
            # exact corner crossing: step both axes and treat the corner as
            # blocked if any of the three cells around it is occupied, which
            # keeps the verdict symmetric under direction reversal
            t = t_max_x
            if t > 1.0:
                return None
            for cx, cy in ((ix + step_x, iy), (ix, iy + step_y),
                           (ix + step_x, iy + step_y)):
                if 0 <= cx < grid.width and 0 <= cy < grid.height and grid.cells[cy, cx]:
                    return (x0 + t * dx, y0 + t * dy)
            t_max_x += t_delta_x
            t_max_y += t_delta_y
            ix += step_x
            iy += step_y
        elif t_max_x < t_max_y:
            t = t_max_x
            t_max_x += t_delta_x
            ix += step_x
        else:
            t = t_max_y
            t_max_y += t_delta_y
            iy += step_y
        if t > 1.0:
            return None
        if ix < 0 or iy < 0 or ix >= grid.width or iy >= grid.height:
            return None
        if grid.cells[iy, ix]:
            return (x0 + t * dx, y0 + t * dy)


def segment_clear(grid: OccupancyGrid, a, b) -> bool:
    return raycast(grid, a, b) is None


def _astar(grid: OccupancyGrid, start, goal):
    """8-connected A* on cell indices; deterministic tie-breaking."""
    w, h = grid.width, grid.height
    occ = grid.cells
    sx, sy = start
    gx, gy = goal
    if occ[sy, sx] or occ[gy, gx]:
        raise NoPathError("start or goal cell occupied under clearance")

    def heur(ix, iy):
        ddx, ddy = abs(ix - gx), abs(iy - gy)
        return (SQRT2 - 1.0) * min(ddx, ddy) + max(ddx, ddy)

    dist = {start: 0.0}
    parent = {}
    pq = [(heur(sx, sy), 0.0, start)]
    neighbors = [(-1, -1, SQRT2), (0, -1, 1.0), (1, -1, SQRT2),
                 (-1, 0, 1.0), (1, 0, 1.0),
                 (-1, 1, SQRT2), (0, 1, 1.0), (1, 1, SQRT2)]
    closed = set()
    while pq:
        _, d, node = heapq.heappop(pq)
        if node in closed:
            continue
        if node == goal:
            path = [node]
            while node in parent:
                node = parent[node]
                path.append(node)
            return path[::-1], d
        closed.add(node)
        ix, iy = node
        for ddx, ddy, cost in neighbors:
            nx, ny = ix + ddx, iy + ddy
            if nx < 0 or ny < 0 or nx >= w or ny >= h or occ[ny, nx]:
                continue
            # no diagonal corner cutting
            if ddx != 0 and ddy != 0 and (occ[iy, nx] or occ[ny, ix]):
                continue
            nd = d + cost
            key = (nx, ny)
            if nd < dist.get(key, math.inf):
                dist[key] = nd
                parent[key] = node
                heapq.heappush(pq, (nd + heur(nx, ny), nd, key))
    raise NoPathError(f"no path from {start} to {goal}")


def shortest_path(grid: OccupancyGrid, a, b, clearance: float = AGENT_RADIUS):
    """Collision-free polyline a -> b after inflating the grid by clearance.

    The 8-connected A* path is shortcut greedily with line-of-sight checks;
    endpoints are kept exact.
    """
    inflated = grid.inflated(clearance)
    res = grid.resolution
    if inflated.occupied_at(*a) or inflated.occupied_at(*b):
        raise NoPathError("endpoint not navigable under clearance")
    if a == b:
        return [tuple(map(float, a))]
    ca = inflated.cell_of(*a)
    cb = inflated.cell_of(*b)
    if ca == cb:
        return [tuple(map(float, a)), tuple(map(float, b))]
    cells, _ = _astar(inflated, ca, cb)
    pts = [tuple(map(float, a))]
    pts += [((ix + 0.5) * res, (iy + 0.5) * res) for ix, iy in cells[1:-1]]
    pts.append(tuple(map(float, b)))
    # greedy line-of-sight shortcutting
    out = [pts[0]]
    i = 0
    while i < len(pts) - 1:
        j = len(pts) - 1
        while j > i + 1 and not segment_clear(inflated, pts[i], pts[j]):
            j -= 1
        out.append(pts[j])
        i = j
    return out


def path_length(points) -> float:
    return float(sum(math.hypot(b[0] - a[0], b[1] - a[1])
                     for a, b in zip(points, points[1:])))


@dataclass
class Scene:
    id: str
    grid: OccupancyGrid
    spawn_regions: list = field(default_factory=list)  # [(x0, y0, x1, y1)]


def random_navigable_point(scene: Scene, rng: SeededRng, min_clearance: float = AGENT_RADIUS):
    """Uniform sample over cell centers navigable at the given clearance."""
    inflated = scene.grid.inflated(min_clearance)
    free = np.nonzero(~inflated.cells)
    if len(free[0]) == 0:
        raise SceneSamplingError("no navigable cell at requested clearance")
    k = int(rng.integers(0, len(free[0])))
    iy, ix = int(free[0][k]), int(free[1][k])
    res = scene.grid.resolution
    return ((ix + 0.5) * res, (iy + 0.5) * res)


def generate_scene(scene_id: str, rng: SeededRng, size_range=(10.0, 20.0),
                   wall_range=(0, 2), resolution: float = DEFAULT_RESOLUTION) -> Scene:
    """Procedural room: rectangular shell plus internal walls with doorways."""
    size_x = float(rng.uniform(*size_range))
    size_y = float(rng.uniform(*size_range))
    w = int(round(size_x / resolution))
    h = int(round(size_y / resolution))
    cells = np.zeros((h, w), dtype=bool)
    n_walls = int(rng.integers(wall_range[0], wall_range[1] + 1))
    door_cells = max(4, int(round(1.2 / resolution)))  # >= 1.2 m doorway
    for _ in range(n_walls):
        vertical = bool(rng.integers(0, 2))
        if vertical:
            ix = int(rng.integers(w // 4, 3 * w // 4))
            door = int(rng.integers(1, max(2, h - door_cells - 1)))
            cells[:door, ix] = True
            cells[door + door_cells:, ix] = True
        else:
            iy = int(rng.integers(h // 4, 3 * h // 4))
            door = int(rng.integers(1, max(2, w - door_cells - 1)))
            cells[iy, :door] = True
            cells[iy, door + door_cells:] = True
    grid = OccupancyGrid(resolution, cells)
    spawn_regions = _find_spawn_regions(grid, rng)
    return Scene(id=scene_id, grid=grid, spawn_regions=spawn_regions)


def _find_spawn_regions(grid: OccupancyGrid, rng: SeededRng, count: int = 4,
                        size: float = 2.0, tries: int = 200):
    """Rejection-sample axis-aligned rectangles of fully navigable space."""
    inflated = grid.inflated(AGENT_RADIUS)
    regions = []
    res = grid.resolution
    nc = int(size / res)
    free = np.nonzero(~inflated.cells)
    if len(free[0]) == 0:
        return regions
    for _ in range(tries):
        if len(regions) >= count:
            break
        k = int(rng.integers(0, len(free[0])))
        iy, ix = int(free[0][k]), int(free[1][k])
        if iy + nc >= grid.height or ix + nc >= grid.width:
            continue
        if not inflated.cells[iy:iy + nc, ix:ix + nc].any():
            regions.append((ix * res, iy * res, (ix + nc) * res, (iy + nc) * res))
    return regions


def _rle_encode(cells: np.ndarray):
    """Row-major run lengths alternating free/occupied, starting with free."""
    flat = cells.ravel()
    runs = []
    current = False
    count = 0
    for v in flat:
        if bool(v) == current:
            count += 1
        else:
            runs.append(count)
            current = bool(v)
            count = 1
    runs.append(count)
    return runs


def _rle_decode(runs, width, height):
    flat = np.zeros(width * height, dtype=bool)
    pos = 0
    occupied = False
    for run in runs:
        if occupied:
            flat[pos:pos + run] = True
        pos += run
        occupied = not occupied
    if pos != width * height:
        raise ValueError(f"RLE decodes to {pos} cells, expected {width * height}")
    return flat.reshape(height, width)


def save_scene(scene: Scene, path):
    payload = {
        "id": scene.id,
        "resolution": scene.grid.resolution,
        "width": scene.grid.width,
        "height": scene.grid.height,
        "occupied_cells": _rle_encode(scene.grid.cells),
        "spawn_regions": [list(r) for r in scene.spawn_regions],
    }
    with open(path, "w") as f:
        json.dump(payload, f)


def load_scene(path) -> Scene:
    with open(path) as f:
        payload = json.load(f)
    for key in ("id", "resolution", "width", "height", "occupied_cells", "spawn_regions"):
        if key not in payload:
            raise ValueError(f"scene file missing field: {key}")
    cells = _rle_decode(payload["occupied_cells"], payload["width"], payload["height"])
    grid = OccupancyGrid(payload["resolution"], cells)
    return Scene(id=payload["id"], grid=grid,
                 spawn_regions=[tuple(r) for r in payload["spawn_regions"]])
