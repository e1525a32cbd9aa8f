"""Pure pursuit execution of predicted trajectories.

The trajectory is given in the current agent frame (agent at the origin,
heading +x). Steering follows the classic lookahead-curvature rule; the
linear velocity tracks the trajectory's own pace and is cut when the
lookahead point is far off-heading, turning in place instead of orbiting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .core import DT_WP, N_W, Trajectory, VelocityCmd, wrap_angle


@dataclass(frozen=True)
class PurePursuitConfig:
    lookahead: float = 0.8       # m
    v_max: float = 2.0           # m/s
    omega_max: float = 2.0       # rad/s
    goal_tolerance: float = 0.15  # m
    turn_in_place_angle: float = math.radians(60.0)
    turn_in_place_scale: float = 0.1
    reverse_angle: float = math.radians(100.0)
    pace_window: int = 3         # waypoints defining the near-term pace

    def __post_init__(self):
        if min(self.lookahead, self.v_max, self.omega_max, self.goal_tolerance,
               self.pace_window) <= 0:
            raise ValueError("pure pursuit parameters must be positive")


def pure_pursuit(traj: Trajectory, cfg: PurePursuitConfig = PurePursuitConfig()) -> VelocityCmd:
    xy = traj.xy
    dists = [math.hypot(x, y) for x, y in xy]
    if max(dists) <= cfg.goal_tolerance:
        return VelocityCmd(0.0, 0.0)

    # first waypoint at or beyond the lookahead distance, else the last
    lx, ly = xy[-1]
    ld = dists[-1]
    for (x, y), d in zip(xy, dists):
        if d >= cfg.lookahead:
            lx, ly, ld = x, y, d
            break

    # nominal speed: the trajectory's own pace, where catch-up bursts at the
    # front of the plan must not be diluted by a slow tail (replanning every
    # step executes only the front anyway)
    arc = 0.0
    px, py = 0.0, 0.0
    for x, y in xy:
        arc += math.hypot(x - px, y - py)
        px, py = x, y
    near = 0.0
    px, py = 0.0, 0.0
    for x, y in xy[:cfg.pace_window]:
        near += math.hypot(x - px, y - py)
        px, py = x, y
    v_nom = min(cfg.v_max, max(arc / (N_W * DT_WP),
                               near / (cfg.pace_window * DT_WP)))

    heading_err = math.atan2(ly, lx)
    if abs(heading_err) > cfg.reverse_angle:
        # plan goes behind the robot: back toward it instead of spinning
        back_err = wrap_angle(heading_err - math.pi)
        omega = max(-cfg.omega_max, min(cfg.omega_max, 2.0 * back_err))
        return VelocityCmd(-v_nom, omega)
    kappa = 2.0 * ly / (ld * ld)
    omega = max(-cfg.omega_max, min(cfg.omega_max, v_nom * kappa))
    v = v_nom
    if abs(heading_err) > cfg.turn_in_place_angle:
        v = v_nom * cfg.turn_in_place_scale
        # curvature alone under-rotates when the point is far off-heading
        omega = max(-cfg.omega_max, min(cfg.omega_max, 2.0 * heading_err))
    return VelocityCmd(min(v, cfg.v_max), omega)
