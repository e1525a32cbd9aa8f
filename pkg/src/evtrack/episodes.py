"""Benchmark episode generation for the STT / DT / AT tasks.

STT: single target, generic instruction. DT: distractors look different and
the instruction describes the target's attributes. AT: distractors look
identical and the instruction is "follow the first person you see".
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

from .avatars import AttributeVector
from .core import Pose2D, SeededRng, wrap_angle
from .world import Scene, random_navigable_point, shortest_path, NoPathError, SceneSamplingError

TASKS = ("STT", "DT", "AT")

COLOR_NAMES = ("red", "blue", "green", "yellow", "black", "white", "orange", "purple")
BUILD_NAMES = ("slim", "average", "broad", "tall")
HEADWEAR_NAMES = ("bare-headed", "cap-wearing", "hat-wearing", "hooded")

DISTRACTOR_COUNT_RANGES = {"STT": (0, 0), "DT": (1, 3), "AT": (1, 2)}


class EpisodeGenerationError(Exception):
    pass


@dataclass(frozen=True)
class EpisodeGenConfig:
    d_min: float = 3.0
    intermediate_waypoints: tuple = (0, 2)
    heading_offset: float = math.radians(30.0)
    agent_spawn_radius: float = 2.0
    distractor_spawn_range: tuple = (1.0, 4.0)
    speed_range: tuple = (1.0, 1.5)
    max_steps: int = 500

    def __post_init__(self):
        if self.d_min <= 0:
            raise ValueError("d_min must be > 0")
        if not 0 < self.speed_range[0] <= self.speed_range[1]:
            raise ValueError("speed_range must be positive and ordered")


@dataclass(frozen=True)
class Instruction:
    mode: str                     # by_attributes | first_seen | any_person
    attributes: AttributeVector | None
    text: str

    def __post_init__(self):
        if self.mode not in ("by_attributes", "first_seen", "any_person"):
            raise ValueError(f"bad instruction mode {self.mode}")
        if self.mode == "by_attributes" and self.attributes is None:
            raise ValueError("by_attributes instruction needs attributes")


@dataclass(frozen=True)
class ActorSpec:
    route: tuple         # ((x, y), ...)
    speed: float
    attributes: AttributeVector


@dataclass(frozen=True)
class EpisodeSpec:
    id: str
    task: str
    scene_id: str
    target: ActorSpec
    distractors: tuple
    agent_start: Pose2D
    instruction: Instruction
    seed: int
    max_steps: int


def describe(attrs: AttributeVector) -> str:
    return (f"the {BUILD_NAMES[attrs.build]} {HEADWEAR_NAMES[attrs.headwear]} person "
            f"in {COLOR_NAMES[attrs.garment_color]}")


def make_instruction(task: str, target_attrs: AttributeVector) -> Instruction:
    if task == "STT":
        return Instruction("any_person", None, "Follow the person.")
    if task == "DT":
        return Instruction("by_attributes", target_attrs, f"Follow {describe(target_attrs)}.")
    if task == "AT":
        return Instruction("first_seen", None, "Follow the first person you see.")
    raise ValueError(f"unknown task {task}")


def sample_attributes(rng: SeededRng, pool=None) -> AttributeVector:
    if pool is not None:
        return pool[int(rng.integers(0, len(pool)))]
    return AttributeVector(int(rng.integers(0, 8)), int(rng.integers(0, 4)),
                           int(rng.integers(0, 4)))


def attribute_pool(split: str):
    """Disjoint attribute-tuple pools for train/test split hygiene."""
    all_attrs = [AttributeVector(c, b, h)
                 for c in range(8) for b in range(4) for h in range(4)]
    if split == "train":
        return [a for a in all_attrs if (a.garment_color + a.build + a.headwear) % 2 == 0]
    if split == "test":
        return [a for a in all_attrs if (a.garment_color + a.build + a.headwear) % 2 == 1]
    raise ValueError(f"unknown split {split}")


def _sample_route(scene: Scene, cfg: EpisodeGenConfig, rng: SeededRng):
    """start + 0-2 intermediates + end, consecutive waypoints >= d_min apart
    and mutually reachable."""
    n_mid = int(rng.integers(cfg.intermediate_waypoints[0], cfg.intermediate_waypoints[1] + 1))
    for _ in range(40):
        pts = [random_navigable_point(scene, rng) for _ in range(n_mid + 2)]
        ok = all(math.hypot(b[0] - a[0], b[1] - a[1]) >= cfg.d_min
                 for a, b in zip(pts, pts[1:]))
        if not ok:
            continue
        try:
            for a, b in zip(pts, pts[1:]):
                shortest_path(scene.grid, a, b)
        except NoPathError:
            continue
        return tuple(pts)
    raise EpisodeGenerationError("could not sample a target route")


def _point_near(scene: Scene, anchor, rng: SeededRng, dist_range, tries=60):
    for _ in range(tries):
        d = float(rng.uniform(*dist_range))
        ang = float(rng.uniform(-math.pi, math.pi))
        p = (anchor[0] + d * math.cos(ang), anchor[1] + d * math.sin(ang))
        if scene.grid.in_bounds(*p) and not scene.grid.inflated(0.3).occupied_at(*p):
            return p
    raise EpisodeGenerationError(f"no navigable point near {anchor}")


def _distractor_route(scene: Scene, target_route, cfg: EpisodeGenConfig, rng: SeededRng):
    """Route initialized near the target route and crossing it: contains a
    point within 1 m of a random target-segment midpoint."""
    seg = int(rng.integers(0, len(target_route) - 1))
    a, b = target_route[seg], target_route[seg + 1]
    mid = ((a[0] + b[0]) / 2, (a[1] + b[1]) / 2)
    start = _point_near(scene, mid, rng, cfg.distractor_spawn_range)
    cross = _point_near(scene, mid, rng, (0.0, 1.0))
    end = _point_near(scene, mid, rng, cfg.distractor_spawn_range)
    return (start, cross, end)


def generate_episode(scene: Scene, task: str, cfg: EpisodeGenConfig, rng: SeededRng,
                     episode_id: str | None = None, attr_pool=None) -> EpisodeSpec:
    if task not in TASKS:
        raise ValueError(f"unknown task {task}")
    last_err = None
    for _ in range(100):
        try:
            return _generate_once(scene, task, cfg, rng, episode_id, attr_pool)
        except (EpisodeGenerationError, NoPathError, SceneSamplingError) as e:
            last_err = e
    raise EpisodeGenerationError(f"episode generation failed after 100 retries: {last_err}")


def _generate_once(scene, task, cfg, rng, episode_id, attr_pool):
    route = _sample_route(scene, cfg, rng)
    target_attrs = sample_attributes(rng, attr_pool)
    target = ActorSpec(route=route, speed=float(rng.uniform(*cfg.speed_range)),
                       attributes=target_attrs)

    # agent near the target's start, roughly facing it
    for _ in range(60):
        start_xy = _point_near(scene, route[0], rng, (0.5, cfg.agent_spawn_radius))
        bearing = math.atan2(route[0][1] - start_xy[1], route[0][0] - start_xy[0])
        heading = wrap_angle(bearing + float(rng.uniform(-cfg.heading_offset, cfg.heading_offset)))
        agent_start = Pose2D(start_xy[0], start_xy[1], heading)
        break
    else:
        raise EpisodeGenerationError("no agent start")

    lo, hi = DISTRACTOR_COUNT_RANGES[task]
    n_distractors = int(rng.integers(lo, hi + 1)) if hi > 0 else 0
    distractors = []
    for _ in range(n_distractors):
        if task == "AT":
            attrs = target_attrs
        else:
            attrs = sample_attributes(rng, attr_pool)
            for _ in range(50):
                if attrs.as_tuple() != target_attrs.as_tuple():
                    break
                attrs = sample_attributes(rng, attr_pool)
            else:
                raise EpisodeGenerationError("could not sample distinct distractor attributes")
        d_route = _distractor_route(scene, route, cfg, rng)
        distractors.append(ActorSpec(route=d_route, speed=float(rng.uniform(*cfg.speed_range)),
                                     attributes=attrs))

    seed = int(rng.integers(0, 2**31))
    eid = episode_id if episode_id is not None else f"{scene.id}-{task}-{seed}"
    return EpisodeSpec(
        id=eid, task=task, scene_id=scene.id, target=target,
        distractors=tuple(distractors), agent_start=agent_start,
        instruction=make_instruction(task, target_attrs),
        seed=seed, max_steps=cfg.max_steps,
    )


# --- serialization ------------------------------------------------------

class EpisodeSchemaError(Exception):
    pass


def _actor_to_json(a: ActorSpec):
    return {"route": [list(p) for p in a.route], "speed": a.speed,
            "attributes": list(a.attributes.as_tuple())}


def _actor_from_json(d, path):
    for key in ("route", "speed", "attributes"):
        if key not in d:
            raise EpisodeSchemaError(f"{path}.{key}")
    return ActorSpec(route=tuple(tuple(p) for p in d["route"]), speed=d["speed"],
                     attributes=AttributeVector(*d["attributes"]))


def episode_to_json(e: EpisodeSpec) -> dict:
    return {
        "id": e.id,
        "task": e.task,
        "scene_id": e.scene_id,
        "target": _actor_to_json(e.target),
        "distractors": [_actor_to_json(d) for d in e.distractors],
        "agent_start": [e.agent_start.x, e.agent_start.y, e.agent_start.theta],
        "instruction": {
            "mode": e.instruction.mode,
            "attributes": list(e.instruction.attributes.as_tuple())
            if e.instruction.attributes else None,
            "text": e.instruction.text,
        },
        "seed": e.seed,
        "max_steps": e.max_steps,
    }


def episode_from_json(d: dict) -> EpisodeSpec:
    for key in ("id", "task", "scene_id", "target", "distractors", "agent_start",
                "instruction", "seed", "max_steps"):
        if key not in d:
            raise EpisodeSchemaError(key)
    instr = d["instruction"]
    for key in ("mode", "attributes", "text"):
        if key not in instr:
            raise EpisodeSchemaError(f"instruction.{key}")
    return EpisodeSpec(
        id=d["id"], task=d["task"], scene_id=d["scene_id"],
        target=_actor_from_json(d["target"], "target"),
        distractors=tuple(_actor_from_json(x, f"distractors[{i}]")
                          for i, x in enumerate(d["distractors"])),
        agent_start=Pose2D(*d["agent_start"]),
        instruction=Instruction(
            mode=instr["mode"],
            attributes=AttributeVector(*instr["attributes"]) if instr["attributes"] else None,
            text=instr["text"]),
        seed=d["seed"], max_steps=d["max_steps"],
    )


def save_episode(e: EpisodeSpec, path):
    with open(path, "w") as f:
        json.dump(episode_to_json(e), f)


def load_episode(path) -> EpisodeSpec:
    with open(path) as f:
        return episode_from_json(json.load(f))
