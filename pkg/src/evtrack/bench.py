"""Episode rollout engine, evaluation protocols, metrics, and baselines.

A rollout ticks sense -> policy -> clamp -> integrate agent -> ORCA-advance
avatars, terminating when the target finishes its route, on agent-target
collision, at the step limit, or (fan-sector protocol) after the target has
been out of region for more than lost_limit consecutive steps.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .avatars import (DEFAULT_RADIUS, OrcaAgent, OrcaParams, advance,
                      make_avatar, orca_step, preferred_velocity)
from .core import Pose2D, SeededRng, VelocityCmd, wrap_angle
from .episodes import EpisodeSpec
from .sensing import ObservationBuffer, Sensor, featurize, pool_frame
from .world import Scene, shortest_path, NoPathError

COLLISION_DIST = 0.6   # m, agent radius + avatar radius
AVOID_MARGIN = 0.05    # extra ORCA radius so discrete steps cannot graze
V_MAX = 2.0
OMEGA_MAX = 2.0


@dataclass(frozen=True)
class ProtocolConfig:
    protocol: str = "evtbench"       # evtbench | fansector
    dt: float = 0.1
    follow_band: tuple = (1.0, 3.0)  # m
    facing_halfangle: float = math.radians(45.0)
    fan_radius: float = 7.5          # m
    lost_limit: int = 50             # consecutive out-of-region steps
    max_steps: int = 500

    def __post_init__(self):
        if self.protocol not in ("evtbench", "fansector"):
            raise ValueError(f"unknown protocol {self.protocol}")
        if self.follow_band[0] >= self.follow_band[1]:
            raise ValueError("follow band must be ordered")

    def tracked(self, distance: float, bearing: float) -> bool:
        if self.protocol == "evtbench":
            return (self.follow_band[0] <= distance <= self.follow_band[1]
                    and abs(bearing) <= self.facing_halfangle)
        return distance <= self.fan_radius and abs(bearing) <= self.facing_halfangle


@dataclass
class StepRecord:
    step: int
    agent: Pose2D
    target: Pose2D
    distractors: list
    command: VelocityCmd
    tracked: bool
    distance: float
    bearing: float


@dataclass
class StepLog:
    episode_id: str
    task: str
    seed: int
    protocol: str
    records: list = field(default_factory=list)
    termination_reason: str = "max_steps"   # target_done|collision|max_steps|lost_50
    valid: bool = True

    @property
    def length(self) -> int:
        return len(self.records)


@dataclass
class StepContext:
    """Everything a policy may consume. Learned policies read only the
    observation buffer and instruction; baselines may use more; the oracle
    reads the privileged simulator state."""
    buffer: ObservationBuffer
    instruction: object
    visible: list
    agent_pose: Pose2D
    episode: EpisodeSpec
    scene: Scene
    target_pose: Pose2D
    rng: SeededRng


class ProtocolMismatchError(Exception):
    pass


def _cycle_route(avatar):
    """Loop an exhausted route by walking it back in reverse (fan-sector)."""
    return replace(avatar, route=tuple(reversed(avatar.route)), route_index=0)


def run_episode(episode: EpisodeSpec, scene: Scene, policy,
                protocol: ProtocolConfig = ProtocolConfig()) -> StepLog:
    if scene.id != episode.scene_id:
        raise ValueError(f"scene {scene.id} does not match episode {episode.scene_id}")
    rng = SeededRng(episode.seed)
    sensor = Sensor(scene)
    buffer = ObservationBuffer()
    orca_params = OrcaParams()

    avatars = {"target": make_avatar("target", Pose2D(*episode.target.route[0], 0.0),
                                     episode.target.route[1:], episode.target.speed,
                                     episode.target.attributes, rng.spawn(1))}
    for i, d in enumerate(episode.distractors):
        avatars[f"distractor{i}"] = make_avatar(
            f"distractor{i}", Pose2D(*d.route[0], 0.0), d.route[1:], d.speed,
            d.attributes, rng.spawn(2 + i))
    phase_rngs = {name: rng.spawn(100 + i) for i, name in enumerate(sorted(avatars))}

    agent_pose = episode.agent_start
    agent_v = (0.0, 0.0)
    log = StepLog(episode_id=episode.id, task=episode.task, seed=episode.seed,
                  protocol=protocol.protocol)
    policy.reset(episode, scene)
    lost_run = 0

    for step in range(protocol.max_steps):
        entities = [(name, (a.pose.x, a.pose.y), a.attributes)
                    for name, a in sorted(avatars.items())]
        visible = sensor.sense(entities, agent_pose)
        buffer.push(pool_frame(featurize(visible)))
        ctx = StepContext(buffer=buffer, instruction=episode.instruction,
                          visible=visible, agent_pose=agent_pose, episode=episode,
                          scene=scene, target_pose=avatars["target"].pose,
                          rng=rng)
        cmd = policy.act(ctx)
        if not cmd.is_finite():
            log.valid = False
            log.termination_reason = "invalid_command"
            return log
        cmd = cmd.clamped(V_MAX, OMEGA_MAX)

        # integrate agent (unicycle), blocked by static occupancy
        nx = agent_pose.x + cmd.v * math.cos(agent_pose.theta) * protocol.dt
        ny = agent_pose.y + cmd.v * math.sin(agent_pose.theta) * protocol.dt
        ntheta = wrap_angle(agent_pose.theta + cmd.omega * protocol.dt)
        if scene.grid.occupied_at(nx, ny):
            # slide along the wall instead of sticking to it
            if not scene.grid.occupied_at(nx, agent_pose.y):
                ny = agent_pose.y
            elif not scene.grid.occupied_at(agent_pose.x, ny):
                nx = agent_pose.x
            else:
                nx, ny = agent_pose.x, agent_pose.y
        agent_v = ((nx - agent_pose.x) / protocol.dt, (ny - agent_pose.y) / protocol.dt)
        agent_pose = Pose2D(nx, ny, ntheta)

        # avatars: ORCA among themselves, robot as non-reciprocating obstacle
        names = sorted(avatars)
        orca_agents = []
        prefs = {}
        for name in names:
            a = avatars[name]
            pv, _ = preferred_velocity(a)
            prefs[name] = pv
            orca_agents.append(OrcaAgent(position=(a.pose.x, a.pose.y),
                                         velocity=prefs[name],
                                         radius=a.radius + AVOID_MARGIN,
                                         pref_velocity=pv, reciprocal=True))
        orca_agents.append(OrcaAgent(position=(agent_pose.x, agent_pose.y),
                                     velocity=agent_v,
                                     radius=DEFAULT_RADIUS + AVOID_MARGIN,
                                     pref_velocity=agent_v, reciprocal=False))
        new_vels = orca_step(orca_agents, orca_params, protocol.dt)
        for name, vel in zip(names, new_vels):
            avatars[name] = advance(avatars[name], vel, protocol.dt, phase_rngs[name])
            if avatars[name].terminal and protocol.protocol == "fansector":
                avatars[name] = _cycle_route(avatars[name])

        target = avatars["target"]
        dx, dy = target.pose.x - agent_pose.x, target.pose.y - agent_pose.y
        distance = math.hypot(dx, dy)
        bearing = wrap_angle(math.atan2(dy, dx) - agent_pose.theta)
        tracked = protocol.tracked(distance, bearing)
        log.records.append(StepRecord(
            step=step, agent=agent_pose, target=target.pose,
            distractors=[avatars[n].pose for n in names if n != "target"],
            command=cmd, tracked=tracked, distance=distance, bearing=bearing))

        if distance < COLLISION_DIST:
            log.termination_reason = "collision"
            return log
        if protocol.protocol == "fansector":
            lost_run = 0 if tracked else lost_run + 1
            if lost_run > protocol.lost_limit:
                log.termination_reason = "lost_50"
                return log
        if target.terminal:
            log.termination_reason = "target_done"
            return log
    log.termination_reason = "max_steps"
    return log


# --- metrics -------------------------------------------------------------

@dataclass
class MetricsReport:
    protocol: str
    sr: float
    tr: float | None = None
    cr: float | None = None
    el: float | None = None
    per_episode: list = field(default_factory=list)

    def to_json(self):
        return {"protocol": self.protocol, "SR": self.sr, "TR": self.tr,
                "CR": self.cr, "EL": self.el, "per_episode": self.per_episode}


def evt_metrics(logs) -> MetricsReport:
    """SR / TR / CR for the follow-band protocol."""
    if not logs:
        raise ValueError("no logs")
    rows = []
    for log in logs:
        if log.protocol != "evtbench":
            raise ProtocolMismatchError(f"log {log.episode_id} is {log.protocol}")
        s = sum(1 for r in log.records if r.tracked)
        l = max(1, log.length)
        success = (log.length > 0 and log.records[-1].tracked
                   and log.termination_reason != "collision")
        rows.append({"episode_id": log.episode_id, "task": log.task,
                     "success": success, "tr": s / l,
                     "collision": log.termination_reason == "collision",
                     "length": log.length, "reason": log.termination_reason})
    sr = sum(r["success"] for r in rows) / len(rows)
    tr = sum(r["tr"] for r in rows) / len(rows)
    cr = sum(r["collision"] for r in rows) / len(rows)
    return MetricsReport(protocol="evtbench", sr=sr, tr=tr, cr=cr,
                         el=sum(r["length"] for r in rows) / len(rows),
                         per_episode=rows)


def fansector_metrics(logs) -> MetricsReport:
    """EL / SR for the fan-sector protocol."""
    if not logs:
        raise ValueError("no logs")
    rows = []
    for log in logs:
        if log.protocol != "fansector":
            raise ProtocolMismatchError(f"log {log.episode_id} is {log.protocol}")
        success = log.termination_reason == "max_steps"
        rows.append({"episode_id": log.episode_id, "task": log.task,
                     "success": success, "length": log.length,
                     "reason": log.termination_reason})
    sr = sum(r["success"] for r in rows) / len(rows)
    el = sum(r["length"] for r in rows) / len(rows)
    return MetricsReport(protocol="fansector", sr=sr, el=el, per_episode=rows)


# --- baseline policies ---------------------------------------------------

class RandomPolicy:
    """Uniform commands within the actuation limits."""

    def reset(self, episode, scene):
        self.rng = SeededRng(episode.seed).spawn(7)

    def act(self, ctx) -> VelocityCmd:
        return VelocityCmd(float(self.rng.uniform(0.0, V_MAX)),
                           float(self.rng.uniform(-OMEGA_MAX, OMEGA_MAX)))


def _instruction_match(visible, instruction):
    """Entities compatible with the instruction, best first."""
    if not visible:
        return []
    if instruction.mode == "by_attributes":
        match = [v for v in visible
                 if v.attributes.as_tuple() == instruction.attributes.as_tuple()]
    elif instruction.mode == "first_seen":
        match = sorted(visible, key=lambda v: v.first_seen_rank)[:1]
    else:
        match = list(visible)
    return sorted(match, key=lambda v: v.distance)


class GreedyBearingPolicy:
    """Steer toward the best-matching visible entity; hold 2 m distance."""

    hold_dist = 2.0

    def reset(self, episode, scene):
        self.last_bearing = 0.0

    def act(self, ctx) -> VelocityCmd:
        match = _instruction_match(ctx.visible, ctx.instruction)
        if not match:
            # search: rotate toward the side the target was last seen
            return VelocityCmd(0.0, math.copysign(1.0, self.last_bearing or 1.0))
        best = match[0]
        self.last_bearing = best.bearing
        omega = max(-OMEGA_MAX, min(OMEGA_MAX, 2.0 * best.bearing))
        v = max(0.0, min(V_MAX, 1.5 * (best.distance - self.hold_dist)))
        return VelocityCmd(v, omega)


class OracleExpertPolicy:
    """Privileged expert: plan to 1.5 m short of the target every step."""

    follow_dist = 1.2
    lookahead = 0.8

    def reset(self, episode, scene):
        pass

    def act(self, ctx) -> VelocityCmd:
        ap = ctx.agent_pose
        tp = ctx.target_pose
        dx, dy = ap.x - tp.x, ap.y - tp.y
        d = math.hypot(dx, dy)
        if d < 1e-9:
            return VelocityCmd(0.0, 0.0)
        goal = (tp.x + self.follow_dist * dx / d, tp.y + self.follow_dist * dy / d)
        # planning can fail when the robot sits inside the inflated margin;
        # retry with smaller clearance before giving up on the planner
        path = None
        for clearance in (0.3, 0.15, 0.0):
            try:
                path = shortest_path(ctx.scene.grid, (ap.x, ap.y), goal,
                                     clearance=clearance)
                break
            except NoPathError:
                continue
        if path is None:
            path = [(ap.x, ap.y), goal]
        # steer at the first path point beyond the lookahead
        point = path[-1]
        for p in path[1:]:
            if math.hypot(p[0] - ap.x, p[1] - ap.y) >= self.lookahead:
                point = p
                break
        err = wrap_angle(math.atan2(point[1] - ap.y, point[0] - ap.x) - ap.theta)
        remaining = math.hypot(goal[0] - ap.x, goal[1] - ap.y)
        t_bearing = wrap_angle(math.atan2(-dy, -dx) - ap.theta)
        if (d < self.follow_dist + 0.2 and abs(t_bearing) < math.radians(80)
                and abs(err) > math.radians(100)):
            # too close with the target still in front: back away facing it
            back_err = wrap_angle(err - math.pi)
            omega = max(-OMEGA_MAX, min(OMEGA_MAX, 2.5 * back_err))
            return VelocityCmd(-min(1.5, 2.5 * remaining), omega)
        if remaining < self.lookahead:
            # at the standoff point: face the target and hold the range band
            omega = max(-OMEGA_MAX, min(OMEGA_MAX, 2.5 * t_bearing))
            v = max(0.0, min(V_MAX, 2.5 * (d - self.follow_dist)))
            if abs(t_bearing) > math.radians(60):
                v = 0.0
            return VelocityCmd(v, omega)
        omega = max(-OMEGA_MAX, min(OMEGA_MAX, 2.5 * err))
        v = max(0.0, min(V_MAX, 2.5 * remaining))
        if abs(err) > math.radians(60):
            v = min(v, 0.2)
        return VelocityCmd(v, omega)


def baseline_policy(kind: str):
    if kind == "random":
        return RandomPolicy()
    if kind == "greedy_bearing":
        return GreedyBearingPolicy()
    if kind == "oracle_expert":
        return OracleExpertPolicy()
    raise ValueError(f"unknown baseline {kind}")


class ModelPolicy:
    """Learned policy: encode the window, denoise anchors, pure-pursue top-1."""

    def __init__(self, policy, denoiser, anchor_set, schedule=None, pursuit_cfg=None):
        import torch
        from .control import PurePursuitConfig
        from .diffusion import make_schedule
        self.torch = torch
        self.policy = policy
        self.denoiser = denoiser
        self.anchor_set = anchor_set
        self.schedule = schedule or make_schedule()
        self.pursuit_cfg = pursuit_cfg or PurePursuitConfig()
        self.policy.eval()
        self.denoiser.eval()

    def reset(self, episode, scene):
        self.sample_rng = SeededRng(episode.seed).spawn(11)

    def act(self, ctx) -> VelocityCmd:
        from .control import pure_pursuit
        from .diffusion import ddim_sample, select_top1
        from .policy import pad_track_tokens
        from .sensing import assemble_track_sequence
        tokens = pad_track_tokens(
            assemble_track_sequence(ctx.buffer, self.policy.cfg.window_k),
            self.policy.cfg)
        with self.torch.no_grad():
            vis = self.torch.as_tensor(tokens, dtype=self.torch.float32).unsqueeze(0)
            condition = self.policy.condition(vis, ctx.instruction)
            trajs, scores = ddim_sample(self.denoiser, self.anchor_set, condition,
                                        self.schedule, self.sample_rng)
        return pure_pursuit(select_top1(trajs, scores), self.pursuit_cfg)


# --- serialization and rendering ----------------------------------------

def save_steplog(log: StepLog, path):
    with open(path, "w") as f:
        for r in log.records:
            f.write(json.dumps({
                "step": r.step,
                "agent": [r.agent.x, r.agent.y, r.agent.theta],
                "target": [r.target.x, r.target.y, r.target.theta],
                "distractors": [[p.x, p.y, p.theta] for p in r.distractors],
                "command": [r.command.v, r.command.omega],
                "tracked": r.tracked,
                "distance": r.distance,
                "bearing": r.bearing,
            }) + "\n")
        f.write(json.dumps({
            "summary": True, "episode_id": log.episode_id, "task": log.task,
            "seed": log.seed, "protocol": log.protocol,
            "termination_reason": log.termination_reason, "valid": log.valid,
            "length": log.length,
        }) + "\n")


def load_steplog(path) -> StepLog:
    records = []
    summary = None
    with open(path) as f:
        for line in f:
            d = json.loads(line)
            if d.get("summary"):
                summary = d
                continue
            records.append(StepRecord(
                step=d["step"], agent=Pose2D(*d["agent"]), target=Pose2D(*d["target"]),
                distractors=[Pose2D(*p) for p in d["distractors"]],
                command=VelocityCmd(*d["command"]), tracked=d["tracked"],
                distance=d["distance"], bearing=d["bearing"]))
    if summary is None:
        raise ValueError("steplog missing summary record")
    return StepLog(episode_id=summary["episode_id"], task=summary["task"],
                   seed=summary["seed"], protocol=summary["protocol"],
                   records=records, termination_reason=summary["termination_reason"],
                   valid=summary["valid"])


def render_svg(log: StepLog, scene: Scene | None = None, scale: float = 30.0) -> str:
    """Single-frame SVG: scene walls plus per-step pose markers and paths."""
    xs = [r.agent.x for r in log.records] + [r.target.x for r in log.records]
    ys = [r.agent.y for r in log.records] + [r.target.y for r in log.records]
    if scene is not None:
        w, h = scene.grid.size_x, scene.grid.size_y
    else:
        w = (max(xs) + 1) if xs else 10
        h = (max(ys) + 1) if ys else 10
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w * scale:.0f}" '
             f'height="{h * scale:.0f}" viewBox="0 0 {w:.2f} {h:.2f}">',
             f'<rect width="{w:.2f}" height="{h:.2f}" fill="white"/>']
    if scene is not None:
        res = scene.grid.resolution
        occ = np.nonzero(scene.grid.cells)
        for iy, ix in zip(*occ):
            parts.append(f'<rect x="{ix * res:.2f}" y="{iy * res:.2f}" '
                         f'width="{res:.2f}" height="{res:.2f}" fill="#444"/>')
    def polyline(pts, color):
        path = " ".join(f"{x:.3f},{y:.3f}" for x, y in pts)
        return f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="0.05"/>'
    if log.records:
        parts.append(polyline([(r.target.x, r.target.y) for r in log.records], "#d62728"))
        parts.append(polyline([(r.agent.x, r.agent.y) for r in log.records], "#1f77b4"))
    for r in log.records:
        parts.append(f'<circle class="agent-pose" cx="{r.agent.x:.3f}" '
                     f'cy="{r.agent.y:.3f}" r="0.08" fill="#1f77b4"/>')
    parts.append("</svg>")
    return "\n".join(parts)
