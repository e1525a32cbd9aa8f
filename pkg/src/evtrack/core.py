"""Shared geometric and stochastic primitives.

Frame convention: x forward, y left, theta counter-clockwise from +x.
Trajectories are expressed in the agent frame at prediction time and
carry N_W waypoints uniformly spaced in time at DT_WP seconds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

N_W = 10            # waypoints per trajectory
DT_WP = 0.3         # seconds between waypoints (3 s horizon)


def wrap_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    wrapped = math.fmod(theta + math.pi, 2.0 * math.pi)
    if wrapped <= 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


@dataclass(frozen=True)
class Pose2D:
    x: float
    y: float
    theta: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.theta)):
            raise ValueError(f"non-finite pose: {self}")
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class VelocityCmd:
    v: float
    omega: float

    def clamped(self, v_max: float, omega_max: float) -> "VelocityCmd":
        return VelocityCmd(
            v=min(max(self.v, -v_max), v_max),
            omega=min(max(self.omega, -omega_max), omega_max),
        )

    def is_finite(self) -> bool:
        return math.isfinite(self.v) and math.isfinite(self.omega)


class Trajectory:
    """Fixed-length waypoint sequence (x, y, theta) in the agent frame."""

    __slots__ = ("waypoints",)

    def __init__(self, waypoints: np.ndarray):
        wp = np.asarray(waypoints, dtype=np.float64)
        if wp.shape != (N_W, 3):
            raise ValueError(f"trajectory must have shape ({N_W}, 3), got {wp.shape}")
        if not np.all(np.isfinite(wp)):
            raise ValueError("non-finite waypoint")
        wp = wp.copy()
        wp[:, 2] = [wrap_angle(t) for t in wp[:, 2]]
        wp.setflags(write=False)
        self.waypoints = wp

    @property
    def xy(self) -> np.ndarray:
        return self.waypoints[:, :2]

    def __eq__(self, other):
        return isinstance(other, Trajectory) and np.array_equal(self.waypoints, other.waypoints)

    def __repr__(self):
        return f"Trajectory({self.waypoints.tolist()!r})"


class SeededRng:
    """Deterministic PRNG stream (PCG64); identical seeds give identical draws."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def choice(self, a, size=None, replace=True):
        return self.gen.choice(a, size=size, replace=replace)

    def shuffle(self, x):
        self.gen.shuffle(x)

    def permutation(self, n):
        return self.gen.permutation(n)

    def spawn(self, key: int) -> "SeededRng":
        """Derive an independent child stream from this rng's seed and a key."""
        return SeededRng((self.seed * 1000003 + int(key)) % (2**63))


def to_agent_frame(world_pose: Pose2D, agent_pose: Pose2D) -> Pose2D:
    """Express a world pose in the agent's local frame."""
    dx = world_pose.x - agent_pose.x
    dy = world_pose.y - agent_pose.y
    c, s = math.cos(agent_pose.theta), math.sin(agent_pose.theta)
    return Pose2D(
        x=c * dx + s * dy,
        y=-s * dx + c * dy,
        theta=wrap_angle(world_pose.theta - agent_pose.theta),
    )


def from_agent_frame(local_pose: Pose2D, agent_pose: Pose2D) -> Pose2D:
    """Inverse of to_agent_frame."""
    c, s = math.cos(agent_pose.theta), math.sin(agent_pose.theta)
    return Pose2D(
        x=agent_pose.x + c * local_pose.x - s * local_pose.y,
        y=agent_pose.y + s * local_pose.x + c * local_pose.y,
        theta=wrap_angle(local_pose.theta + agent_pose.theta),
    )


def recompute_headings(points) -> Trajectory:
    """Build a trajectory whose headings follow consecutive displacements.

    theta_j is the atan2 of the segment leaving waypoint j; the last waypoint
    copies the previous heading. Coincident consecutive points reuse the
    previous heading (0 if there has been no motion yet).
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] < 2:
        raise ValueError(f"need >= 2 (x, y) points, got shape {pts.shape}")
    n = pts.shape[0]
    thetas = np.zeros(n)
    prev = 0.0
    for j in range(n - 1):
        dx = pts[j + 1, 0] - pts[j, 0]
        dy = pts[j + 1, 1] - pts[j, 1]
        if dx == 0.0 and dy == 0.0:
            thetas[j] = prev
        else:
            thetas[j] = math.atan2(dy, dx)
            prev = thetas[j]
    thetas[n - 1] = thetas[n - 2]
    out = np.column_stack([pts[:, 0], pts[:, 1], thetas])
    if n != N_W:
        raise ValueError(f"expected {N_W} points, got {n}")
    return Trajectory(out)
