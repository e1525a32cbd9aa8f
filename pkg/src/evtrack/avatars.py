"""Humanoid avatar motion: waypoint routes, stop-and-go walking, ORCA.

Avatars follow precomputed routes at a natural walking speed (1.0-1.5 m/s)
with on-and-off walking phases. Local collision avoidance among avatars (and
against the robot, which does not reciprocate) uses ORCA half-plane
constraints solved by an incremental 2D linear program.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .core import Pose2D, SeededRng, wrap_angle

WALK_SPEED_RANGE = (0.4, 1.8)   # m/s, slow stroll to brisk walk
WALK_DURATION_RANGE = (3.0, 8.0)  # s
PAUSE_DURATION_RANGE = (0.5, 2.0)  # s
WAYPOINT_REACH_DIST = 0.25      # m
DEFAULT_RADIUS = 0.3            # m


@dataclass(frozen=True)
class AttributeVector:
    garment_color: int  # [0, 8)
    build: int          # [0, 4)
    headwear: int       # [0, 4)

    def __post_init__(self):
        if not (0 <= self.garment_color < 8 and 0 <= self.build < 4 and 0 <= self.headwear < 4):
            raise ValueError(f"attribute code out of range: {self}")

    def as_tuple(self):
        return (self.garment_color, self.build, self.headwear)


@dataclass(frozen=True)
class OrcaParams:
    time_horizon: float = 2.0   # s
    neighbor_range: float = 5.0  # m
    max_speed: float = 2.0      # m/s

    def __post_init__(self):
        if min(self.time_horizon, self.neighbor_range, self.max_speed) <= 0:
            raise ValueError("ORCA parameters must be positive")


@dataclass(frozen=True)
class AvatarState:
    id: str
    pose: Pose2D
    radius: float
    route: tuple          # ((x, y), ...)
    route_index: int
    speed: float          # sampled walking speed, m/s
    walk_phase: str       # "walking" | "paused"
    phase_timer: float    # s remaining in current phase
    attributes: AttributeVector

    @property
    def terminal(self) -> bool:
        return self.route_index >= len(self.route)


def make_avatar(avatar_id, pose, route, speed, attributes, rng: SeededRng,
                radius=DEFAULT_RADIUS) -> AvatarState:
    if not (WALK_SPEED_RANGE[0] <= speed <= WALK_SPEED_RANGE[1]):
        raise ValueError(f"speed {speed} outside walking range {WALK_SPEED_RANGE}")
    return AvatarState(
        id=avatar_id, pose=pose, radius=radius, route=tuple(tuple(p) for p in route),
        route_index=0, speed=speed, walk_phase="walking",
        phase_timer=float(rng.uniform(*WALK_DURATION_RANGE)), attributes=attributes,
    )


def preferred_velocity(avatar: AvatarState):
    """Velocity toward the current route waypoint; zero while paused or done.

    Returns ((vx, vy), terminal). The waypoint index is advanced by
    `advance`, not here.
    """
    if avatar.terminal:
        return (0.0, 0.0), True
    if avatar.walk_phase == "paused":
        return (0.0, 0.0), False
    wx, wy = avatar.route[avatar.route_index]
    dx, dy = wx - avatar.pose.x, wy - avatar.pose.y
    d = math.hypot(dx, dy)
    if d < 1e-9:
        return (0.0, 0.0), False
    return (avatar.speed * dx / d, avatar.speed * dy / d), False


def advance(avatar: AvatarState, velocity, dt: float, rng: SeededRng) -> AvatarState:
    """Integrate one step: move, advance waypoints, tick the walk phase."""
    if dt <= 0:
        raise ValueError("dt must be > 0")
    vx, vy = velocity
    x = avatar.pose.x + vx * dt
    y = avatar.pose.y + vy * dt
    theta = avatar.pose.theta
    if math.hypot(vx, vy) > 1e-6:
        theta = math.atan2(vy, vx)
    route_index = avatar.route_index
    while route_index < len(avatar.route):
        wx, wy = avatar.route[route_index]
        if math.hypot(wx - x, wy - y) <= WAYPOINT_REACH_DIST:
            route_index += 1
        else:
            break
    phase, timer = avatar.walk_phase, avatar.phase_timer - dt
    if timer <= 0.0:
        if phase == "walking":
            phase = "paused"
            timer = float(rng.uniform(*PAUSE_DURATION_RANGE))
        else:
            phase = "walking"
            timer = float(rng.uniform(*WALK_DURATION_RANGE))
    return replace(avatar, pose=Pose2D(x, y, theta), route_index=route_index,
                   walk_phase=phase, phase_timer=timer)


# --- ORCA ---------------------------------------------------------------

@dataclass(frozen=True)
class OrcaAgent:
    position: tuple
    velocity: tuple
    radius: float
    pref_velocity: tuple
    reciprocal: bool = True   # False: other agents take full responsibility


def _det(a, b):
    return a[0] * b[1] - a[1] * b[0]


def _orca_line(pa, va, ra, pb, vb, rb, responsibility, time_horizon, dt):
    """Half-plane constraint (point, direction) for agent a against agent b."""
    rel_pos = (pb[0] - pa[0], pb[1] - pa[1])
    rel_vel = (va[0] - vb[0], va[1] - vb[1])
    dist_sq = rel_pos[0] ** 2 + rel_pos[1] ** 2
    comb_r = ra + rb
    comb_r_sq = comb_r * comb_r

    if dist_sq > comb_r_sq:
        inv_th = 1.0 / time_horizon
        w = (rel_vel[0] - inv_th * rel_pos[0], rel_vel[1] - inv_th * rel_pos[1])
        w_len_sq = w[0] ** 2 + w[1] ** 2
        dot1 = w[0] * rel_pos[0] + w[1] * rel_pos[1]
        if dot1 < 0.0 and dot1 * dot1 > comb_r_sq * w_len_sq:
            # project on cut-off circle
            w_len = math.sqrt(w_len_sq)
            unit_w = (w[0] / w_len, w[1] / w_len)
            direction = (unit_w[1], -unit_w[0])
            u = ((comb_r * inv_th - w_len) * unit_w[0],
                 (comb_r * inv_th - w_len) * unit_w[1])
        else:
            # project on legs
            leg = math.sqrt(dist_sq - comb_r_sq)
            if _det(rel_pos, w) > 0.0:
                direction = ((rel_pos[0] * leg - rel_pos[1] * comb_r) / dist_sq,
                             (rel_pos[0] * comb_r + rel_pos[1] * leg) / dist_sq)
            else:
                direction = (-(rel_pos[0] * leg + rel_pos[1] * comb_r) / dist_sq,
                             (rel_pos[0] * comb_r - rel_pos[1] * leg) / dist_sq)
            dot2 = rel_vel[0] * direction[0] + rel_vel[1] * direction[1]
            u = (dot2 * direction[0] - rel_vel[0], dot2 * direction[1] - rel_vel[1])
    else:
        # already colliding: resolve within one timestep
        inv_dt = 1.0 / dt
        w = (rel_vel[0] - inv_dt * rel_pos[0], rel_vel[1] - inv_dt * rel_pos[1])
        w_len = math.hypot(*w)
        if w_len < 1e-12:
            unit_w = (1.0, 0.0)
        else:
            unit_w = (w[0] / w_len, w[1] / w_len)
        direction = (unit_w[1], -unit_w[0])
        u = ((comb_r * inv_dt - w_len) * unit_w[0],
             (comb_r * inv_dt - w_len) * unit_w[1])

    point = (va[0] + responsibility * u[0], va[1] + responsibility * u[1])
    return point, direction


def _lp1(lines, line_no, radius, opt_vel, result):
    """Clip the optimum onto constraint line line_no (within the speed disc)."""
    point, direction = lines[line_no]
    dot = point[0] * direction[0] + point[1] * direction[1]
    discriminant = dot * dot + radius * radius - (point[0] ** 2 + point[1] ** 2)
    if discriminant < 0.0:
        return None
    sqrt_d = math.sqrt(discriminant)
    t_left, t_right = -dot - sqrt_d, -dot + sqrt_d
    for i in range(line_no):
        pi, di = lines[i]
        denom = _det(direction, di)
        numer = _det(di, (point[0] - pi[0], point[1] - pi[1]))
        if abs(denom) < 1e-12:
            if numer < 0.0:
                return None
            continue
        t = numer / denom
        if denom >= 0.0:
            t_right = min(t_right, t)
        else:
            t_left = max(t_left, t)
        if t_left > t_right:
            return None
    t = (opt_vel[0] - point[0]) * direction[0] + (opt_vel[1] - point[1]) * direction[1]
    t = min(max(t, t_left), t_right)
    return (point[0] + t * direction[0], point[1] + t * direction[1])


def _lp2(lines, radius, opt_vel):
    """Incremental 2D LP; returns (result, index of first failing line or None)."""
    speed = math.hypot(*opt_vel)
    if speed > radius:
        result = (opt_vel[0] * radius / speed, opt_vel[1] * radius / speed)
    else:
        result = opt_vel
    for i, (point, direction) in enumerate(lines):
        if _det(direction, (point[0] - result[0], point[1] - result[1])) > 0.0:
            clipped = _lp1(lines, i, radius, opt_vel, result)
            if clipped is None:
                return result, i
            result = clipped
    return result, None


def _least_penetrating(lines, radius, fallback):
    """Deterministic min-max-violation search when the LP is infeasible."""
    best = fallback
    best_pen = max(
        _det(d, (p[0] - fallback[0], p[1] - fallback[1])) for p, d in lines)
    for i_dir in range(32):
        ang = 2.0 * math.pi * i_dir / 32
        for i_sp in range(1, 9):
            v = (radius * i_sp / 8 * math.cos(ang), radius * i_sp / 8 * math.sin(ang))
            pen = max(_det(d, (p[0] - v[0], p[1] - v[1])) for p, d in lines)
            if pen < best_pen - 1e-12:
                best_pen = pen
                best = v
    return best


def orca_step(agents, params: OrcaParams, dt: float):
    """One ORCA velocity update for every reciprocal agent.

    `agents` is a list of OrcaAgent. Non-reciprocal agents (the robot) keep
    their own velocity; reciprocal agents treat them with full responsibility.
    Returns the list of new velocities in input order.
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    out = []
    for i, a in enumerate(agents):
        if not a.reciprocal:
            out.append(tuple(a.velocity))
            continue
        lines = []
        for j, b in enumerate(agents):
            if j == i:
                continue
            d = math.hypot(b.position[0] - a.position[0], b.position[1] - a.position[1])
            if d > params.neighbor_range:
                continue
            responsibility = 0.5 if b.reciprocal else 1.0
            lines.append(_orca_line(a.position, a.velocity, a.radius,
                                    b.position, b.velocity, b.radius,
                                    responsibility, params.time_horizon, dt))
        result, fail = _lp2(lines, params.max_speed, a.pref_velocity)
        if fail is not None:
            result = _least_penetrating(lines, params.max_speed, result)
        out.append(result)
    return out
