"""Synthetic egocentric observation pipeline.

A fan-shaped sensor (90 deg, 7.5 m) with raycast occlusion replaces RGB
input. Visible entities are rasterized into a 16x16 polar feature grid
(azimuth x distance, 16 channels), which is block-mean pooled into 64 fine
or 4 coarse tokens. A sliding window keeps the latest k frames; the tracking
sequence is coarse history plus fine latest, the recognition sequence is all
coarse tokens.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .avatars import AttributeVector
from .core import Pose2D, wrap_angle
from .world import Scene, raycast

FOV = math.pi / 2          # rad
SENSE_RANGE = 7.5          # m
GRID_AZ = 16
GRID_DIST = 16
N_CELLS = GRID_AZ * GRID_DIST  # 256 cells, matching the patch-count geometry
C_FEAT = 16
FINE_TOKENS = 64
COARSE_TOKENS = 4
WINDOW_K = 32
ENTITY_RADIUS = 0.3


@dataclass(frozen=True)
class VisibleEntity:
    id: str
    bearing: float       # rad, 0 = straight ahead, positive left
    distance: float      # m
    attributes: AttributeVector
    first_seen_rank: int


class Sensor:
    """Per-episode fan sensor; assigns and persists first-seen ranks."""

    def __init__(self, scene: Scene, fov: float = FOV, range_: float = SENSE_RANGE):
        self.scene = scene
        self.fov = fov
        self.range = range_
        self._first_seen: dict = {}

    def sense(self, entities, agent_pose: Pose2D):
        """entities: iterable of (id, (x, y), AttributeVector).

        An entity is visible iff it lies inside the fan and the ray from the
        agent to its center is unobstructed.
        """
        visible = []
        candidates = []
        for eid, xy, attrs in entities:
            dx, dy = xy[0] - agent_pose.x, xy[1] - agent_pose.y
            d = math.hypot(dx, dy)
            if d <= 0.0 or d > self.range:
                continue
            bearing = wrap_angle(math.atan2(dy, dx) - agent_pose.theta)
            if abs(bearing) > self.fov / 2:
                continue
            if raycast(self.scene.grid, (agent_pose.x, agent_pose.y), xy) is not None:
                continue
            candidates.append((eid, bearing, d, attrs))
        # first-seen ranks: assign in order of distance on simultaneous debut
        for eid, _, d, _ in sorted(candidates, key=lambda c: (c[2], c[0])):
            if eid not in self._first_seen:
                self._first_seen[eid] = len(self._first_seen)
        for eid, bearing, d, attrs in candidates:
            visible.append(VisibleEntity(id=eid, bearing=bearing, distance=d,
                                         attributes=attrs,
                                         first_seen_rank=self._first_seen[eid]))
        return visible


def featurize(visible, fov: float = FOV, range_: float = SENSE_RANGE) -> np.ndarray:
    """Rasterize visible entities into the (GRID_DIST, GRID_AZ, C_FEAT) grid.

    Channel layout: 0 occupancy, 1 normalized distance, 2-9 garment color
    one-hot, 10-13 build one-hot, 14-15 headwear code (2-bit binary).
    Contributions of multiple entities accumulate additively.
    """
    grid = np.zeros((GRID_DIST, GRID_AZ, C_FEAT), dtype=np.float64)
    az_width = fov / GRID_AZ
    dist_width = range_ / GRID_DIST
    for ent in visible:
        half_extent = math.asin(min(1.0, ENTITY_RADIUS / ent.distance))
        lo = (ent.bearing - half_extent + fov / 2) / az_width
        hi = (ent.bearing + half_extent + fov / 2) / az_width
        az_lo = max(0, int(math.floor(lo)))
        az_hi = min(GRID_AZ - 1, int(math.floor(hi)))
        di = min(GRID_DIST - 1, max(0, int(ent.distance / dist_width)))
        feat = np.zeros(C_FEAT)
        feat[0] = 1.0
        feat[1] = ent.distance / range_
        feat[2 + ent.attributes.garment_color] = 1.0
        feat[10 + ent.attributes.build] = 1.0
        feat[14] = float(ent.attributes.headwear & 1)
        feat[15] = float((ent.attributes.headwear >> 1) & 1)
        for az in range(az_lo, az_hi + 1):
            grid[di, az] += feat
    return grid


def grid_pool(grid: np.ndarray, out_tokens: int) -> np.ndarray:
    """Block-mean pool the 16x16xC grid down to out_tokens tokens."""
    if grid.shape[:2] != (GRID_DIST, GRID_AZ):
        raise ValueError(f"expected ({GRID_DIST}, {GRID_AZ}, C) grid, got {grid.shape}")
    side = int(round(math.sqrt(out_tokens)))
    if side * side != out_tokens or GRID_DIST % side != 0:
        raise ValueError(f"out_tokens {out_tokens} does not tile the grid into square blocks")
    block = GRID_DIST // side
    c = grid.shape[2]
    pooled = grid.reshape(side, block, side, block, c).mean(axis=(1, 3))
    return pooled.reshape(out_tokens, c)


@dataclass(frozen=True)
class PooledTokens:
    fine: np.ndarray    # (64, C_FEAT)
    coarse: np.ndarray  # (4, C_FEAT)


def pool_frame(grid: np.ndarray) -> PooledTokens:
    return PooledTokens(fine=grid_pool(grid, FINE_TOKENS),
                        coarse=grid_pool(grid, COARSE_TOKENS))


class ObservationBuffer:
    """Ring buffer of the latest k frames' pooled tokens (oldest first)."""

    def __init__(self, k: int = WINDOW_K):
        if k < 1:
            raise ValueError("window must hold at least one frame")
        self.k = k
        self.window = deque(maxlen=k)
        self.frame_count = 0

    def push(self, tokens: PooledTokens):
        self.window.append(tokens)
        self.frame_count += 1

    def __len__(self):
        return len(self.window)


def assemble_track_sequence(buffer: ObservationBuffer, k: int | None = None) -> np.ndarray:
    """Coarse tokens of every frame but the newest, then fine of the newest.

    `k` restricts the window to the latest k frames (for shorter histories
    than the buffer holds)."""
    if len(buffer) == 0:
        raise ValueError("empty observation buffer")
    frames = list(buffer.window)
    if k is not None:
        frames = frames[-k:]
    parts = [f.coarse for f in frames[:-1]] + [frames[-1].fine]
    return np.concatenate(parts, axis=0)


def assemble_vqa_sequence(buffer: ObservationBuffer) -> np.ndarray:
    """Coarse tokens of every frame in the window."""
    if len(buffer) == 0:
        raise ValueError("empty observation buffer")
    return np.concatenate([f.coarse for f in buffer.window], axis=0)
