"""Training-data assembly: expert rollouts, recognition synthesis, mixing.

Replays store per-frame entity and agent poses rather than feature tensors;
tokens are recomputed deterministically from a replay, so one corpus serves
pooling and featurization variants alike. Tracking samples pair a replay
window with the expert's future trajectory in the agent frame; recognition
samples pair a window with the answer slot of the entity matching the
instruction (slots ordered left to right in the latest frame).
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .anchors import RHO
from .avatars import AttributeVector
from .core import (DT_WP, N_W, Pose2D, SeededRng, Trajectory, VelocityCmd,
                   recompute_headings, to_agent_frame)
from .episodes import EpisodeSpec, Instruction, make_instruction
from .policy import instruction_indices, pad_track_tokens
from .sensing import (COARSE_TOKENS, FINE_TOKENS, WINDOW_K, Sensor, featurize,
                      grid_pool)
from .world import Scene, random_navigable_point

SAMPLE_STRIDE = 5          # one sample every 5 sim steps (0.5 s)
WP_STRIDE = 3              # sim steps between waypoints (DT_WP / dt)
RECOG_FRAMES = 8


@dataclass
class ReplayFrame:
    agent: Pose2D
    entities: list   # [(id, (x, y), AttributeVector), ...]


@dataclass
class SceneReplay:
    episode_id: str
    scene_id: str
    seed: int
    frames: list = field(default_factory=list)


@dataclass
class TrackSample:
    replay_id: str
    frame: int               # index of the newest frame in the window
    instruction: Instruction
    tau_gt: Trajectory


@dataclass
class RecognitionSample:
    replay_id: str
    frame: int
    instruction: Instruction
    gold_slot: int


def replay_from_log(episode: EpisodeSpec, log) -> SceneReplay:
    frames = []
    for r in log.records:
        ents = [("target", (r.target.x, r.target.y), episode.target.attributes)]
        for i, p in enumerate(r.distractors):
            ents.append((f"distractor{i}", (p.x, p.y), episode.distractors[i].attributes))
        frames.append(ReplayFrame(agent=r.agent, entities=ents))
    return SceneReplay(episode_id=episode.id, scene_id=episode.scene_id,
                       seed=episode.seed, frames=frames)


def replay_tokens(replay: SceneReplay, scene: Scene):
    """Re-featurize every frame: list of (fine, coarse) token arrays.

    Runs a fresh sensor from frame 0 so first-seen ranks are reproduced."""
    sensor = Sensor(scene)
    out = []
    for fr in replay.frames:
        grid = featurize(sensor.sense(fr.entities, fr.agent))
        out.append((grid_pool(grid, FINE_TOKENS), grid_pool(grid, COARSE_TOKENS)))
    return out


def collect_expert(episodes, scenes: dict, expert, protocol=None,
                   window_k: int = WINDOW_K, stride: int = SAMPLE_STRIDE):
    """Roll the expert over episodes; keep successful ones as samples.

    Returns (track_samples, replays). scenes maps scene_id -> Scene."""
    from .bench import ProtocolConfig, run_episode
    protocol = protocol or ProtocolConfig()
    samples = []
    replays = {}
    for episode in episodes:
        scene = scenes[episode.scene_id]
        log = run_episode(episode, scene, expert, protocol)
        if log.length == 0 or not log.records[-1].tracked:
            continue
        replay = replay_from_log(episode, log)
        replays[episode.id] = replay
        agent_poses = [r.agent for r in log.records]
        n = len(agent_poses)
        for t in range(stride - 1, n, stride):
            pts = []
            for j in range(1, N_W + 1):
                idx = min(n - 1, t + j * WP_STRIDE)
                local = to_agent_frame(agent_poses[idx], agent_poses[t])
                pts.append((local.x, local.y))
            samples.append(TrackSample(replay_id=episode.id, frame=t,
                                       instruction=episode.instruction,
                                       tau_gt=recompute_headings(pts)))
    return samples, replays


class NoisyExpertPolicy:
    """Expert with OU-filtered steering noise for data collection.

    Pure expert replays only visit on-policy states; the learner then never
    sees recovery situations. Persistent steering noise pushes rollouts off
    the nominal path while the expert keeps correcting, so samples (and their
    recomputed future trajectories) cover the surrounding state tube.

    sigma may be a single level or a ladder of levels; a ladder is assigned
    per episode (keyed by the episode seed) so the corpus mixes mildly and
    strongly perturbed rollouts."""

    def __init__(self, inner, sigma=0.3, persistence: float = 0.9):
        self.inner = inner
        self.sigma = sigma
        self.persistence = persistence

    def reset(self, episode, scene):
        self.inner.reset(episode, scene)
        self._rng = SeededRng(episode.seed).spawn(13)
        if isinstance(self.sigma, (tuple, list)):
            self._sigma = self.sigma[episode.seed % len(self.sigma)]
        else:
            self._sigma = self.sigma
        self._ou = 0.0

    def act(self, ctx) -> VelocityCmd:
        cmd = self.inner.act(ctx)
        self._ou = (self.persistence * self._ou
                    + float(self._rng.normal(0.0, self._sigma)))
        return VelocityCmd(cmd.v, cmd.omega + self._ou)


def _coarse_block(bearing: float, distance: float):
    """Which 2x2 coarse pooling block a detection lands in.

    Returns (azimuth half: 0 right / 1 left, distance half: 0 near / 1 far)."""
    from .sensing import FOV, SENSE_RANGE
    return (0 if bearing < 0 else 1, 0 if distance < SENSE_RANGE / 2 else 1)


def slot_order_key(bearing: float, distance: float):
    """Answer-slot ordering: left half before right, near before far.

    Coarse tokens resolve only azimuth and distance halves, so the slot
    order must be a function of those halves to stay observable."""
    az, dist = _coarse_block(bearing, distance)
    return (-az, dist)


def synth_recognition(scenes, rng: SeededRng, n: int, frames: int = RECOG_FRAMES):
    """Toy recognition corpus: 1-3 entities in view, attribute instruction
    matching exactly one of them; the answer slot is the matching entity's
    position under slot_order_key in the latest frame. Entities occupy
    distinct coarse blocks so the order is recoverable from coarse tokens.

    Returns (recognition_samples, replays)."""
    samples = []
    replays = {}
    scene_list = sorted(scenes.values(), key=lambda s: s.id)
    made = 0
    attempt = 0
    while made < n:
        attempt += 1
        if attempt > 200 * n:
            raise RuntimeError("recognition synthesis kept failing")
        scene = scene_list[int(rng.integers(0, len(scene_list)))]
        ax, ay = random_navigable_point(scene, rng)
        heading = float(rng.uniform(-math.pi, math.pi))
        agent = Pose2D(ax, ay, heading)
        n_ent = int(rng.integers(1, 4))
        attrs = []
        while len(attrs) < n_ent:
            a = AttributeVector(int(rng.integers(0, 8)), int(rng.integers(0, 4)),
                                int(rng.integers(0, 4)))
            if all(a.as_tuple() != b.as_tuple() for b in attrs):
                attrs.append(a)
        blocks = [(b % 2, b // 2) for b in rng.permutation(4)[:n_ent]]
        ents = []
        for i, (a, (az_half, dist_half)) in enumerate(zip(attrs, blocks)):
            # sample inside the block with margin so drift cannot cross halves
            lo, hi = (-0.68, -0.10) if az_half == 0 else (0.10, 0.68)
            bearing = float(rng.uniform(lo, hi))
            dist = float(rng.uniform(1.0, 3.3) if dist_half == 0
                         else rng.uniform(4.2, 7.0))
            ex = ax + dist * math.cos(heading + bearing)
            ey = ay + dist * math.sin(heading + bearing)
            if not scene.grid.in_bounds(ex, ey) or scene.grid.occupied_at(ex, ey):
                break
            ents.append((f"e{i}", (ex, ey), a, bearing, dist))
        if len(ents) != n_ent:
            continue
        # small drift across frames, staying within the sampled block
        drift = [(float(rng.uniform(-0.03, 0.03)), float(rng.uniform(-0.03, 0.03)))
                 for _ in ents]
        frame_list = []
        for f in range(frames):
            frame_list.append(ReplayFrame(
                agent=agent,
                entities=[(eid, (x + ddx * f, y + ddy * f), a)
                          for (eid, (x, y), a, _, _), (ddx, ddy) in zip(ents, drift)]))
        # verify visibility, block separation, and slot order in the last frame
        sensor = Sensor(scene)
        visible = None
        for fr in frame_list:
            visible = sensor.sense(fr.entities, fr.agent)
        if visible is None or len(visible) != n_ent:
            continue
        if len({_coarse_block(v.bearing, v.distance) for v in visible}) != n_ent:
            continue
        pick = int(rng.integers(0, n_ent))
        instruction = Instruction("by_attributes", attrs[pick],
                                  f"which person is {attrs[pick].as_tuple()}")
        order = sorted(visible, key=lambda v: slot_order_key(v.bearing, v.distance))
        gold = next(i for i, v in enumerate(order) if
                    v.attributes.as_tuple() == attrs[pick].as_tuple())
        rid = f"recog-{scene.id}-{made}-{rng.seed}"
        replays[rid] = SceneReplay(episode_id=rid, scene_id=scene.id,
                                   seed=rng.seed, frames=frame_list)
        samples.append(RecognitionSample(replay_id=rid, frame=frames - 1,
                                         instruction=instruction, gold_slot=gold))
        made += 1
    return samples, replays


@dataclass
class Dataset:
    track: list
    recognition: list
    replays: dict            # replay_id -> SceneReplay
    scenes: dict             # scene_id -> Scene
    ratio: tuple = (1, 1)
    split: str = "train"
    seed: int = 0
    window_k: int = WINDOW_K
    _token_cache: dict = field(default_factory=dict, repr=False)

    def _tokens(self, replay_id):
        if replay_id not in self._token_cache:
            replay = self.replays[replay_id]
            self._token_cache[replay_id] = replay_tokens(
                replay, self.scenes[replay.scene_id])
        return self._token_cache[replay_id]

    def track_tokens(self, sample: TrackSample, cfg):
        """Fixed-length tracking token matrix for one sample."""
        toks = self._tokens(sample.replay_id)
        lo = max(0, sample.frame - self.window_k + 1)
        window = toks[lo:sample.frame + 1]
        parts = [c for _, c in window[:-1]] + [window[-1][0]]
        return pad_track_tokens(np.concatenate(parts, axis=0), cfg)

    def recognition_tokens(self, sample: RecognitionSample):
        toks = self._tokens(sample.replay_id)
        return np.concatenate([c for _, c in toks[:sample.frame + 1]], axis=0)

    def _order(self, epoch: int):
        """Deterministic interleaving at the configured track:recognition ratio."""
        rng = SeededRng(self.seed * 9176 + epoch)
        track_idx = list(range(len(self.track)))
        recog_idx = list(range(len(self.recognition)))
        rng.shuffle(track_idx)
        rng.shuffle(recog_idx)
        rt, rr = self.ratio
        order = []
        ti = ri = 0
        while ti < len(track_idx) or ri < len(recog_idx):
            for _ in range(rt):
                if ti < len(track_idx):
                    order.append(("track", track_idx[ti]))
                    ti += 1
            for _ in range(rr):
                if ri < len(recog_idx):
                    order.append(("recognition", recog_idx[ri]))
                    ri += 1
        return order

    def batches_per_epoch(self, batch_size: int) -> int:
        total = len(self.track) + len(self.recognition)
        return max(1, math.ceil(total / batch_size))

    def iter_batches(self, batch_size: int, epoch: int, cfg=None):
        from .policy import EncoderConfig
        cfg = cfg or EncoderConfig(window_k=self.window_k)
        order = self._order(epoch)
        for start in range(0, len(order), batch_size):
            chunk = order[start:start + batch_size]
            batch = {}
            t_idx = [i for kind, i in chunk if kind == "track"]
            r_idx = [i for kind, i in chunk if kind == "recognition"]
            if t_idx:
                ss = [self.track[i] for i in t_idx]
                batch["track"] = {
                    "tokens": np.stack([self.track_tokens(s, cfg) for s in ss]),
                    "instr": np.array([instruction_indices(s.instruction) for s in ss]),
                    "tau_gt_norm": np.stack([s.tau_gt.xy.ravel() / RHO for s in ss]),
                }
            if r_idx:
                ss = [self.recognition[i] for i in r_idx]
                batch["recognition"] = {
                    "tokens": np.stack([self.recognition_tokens(s) for s in ss]),
                    "instr": np.array([instruction_indices(s.instruction) for s in ss]),
                    "gold_slot": np.array([s.gold_slot for s in ss]),
                }
            yield batch


def mix(track, recognition, replays, scenes, ratio=(1, 1), split="train",
        seed=0, window_k: int = WINDOW_K) -> Dataset:
    if ratio[0] > 0 and not track:
        raise ValueError("ratio demands track samples but none given")
    if ratio[1] > 0 and not recognition:
        raise ValueError("ratio demands recognition samples but none given")
    return Dataset(track=list(track),
                   recognition=list(recognition) if ratio[1] > 0 else [],
                   replays=replays, scenes=scenes, ratio=ratio, split=split,
                   seed=seed, window_k=window_k)


# --- serialization -------------------------------------------------------

def _instr_json(instr: Instruction):
    return {"mode": instr.mode,
            "attributes": list(instr.attributes.as_tuple()) if instr.attributes else None,
            "text": instr.text}


def _instr_from_json(d):
    return Instruction(d["mode"],
                       AttributeVector(*d["attributes"]) if d["attributes"] else None,
                       d["text"])


def save_dataset(dataset: Dataset, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    sample_lines = []
    for s in dataset.track:
        sample_lines.append(json.dumps({
            "kind": "track", "replay_id": s.replay_id,
            "scene_id": dataset.replays[s.replay_id].scene_id,
            "seed": dataset.replays[s.replay_id].seed,
            "frame_range": [max(0, s.frame - dataset.window_k + 1), s.frame],
            "instruction": _instr_json(s.instruction),
            "tau_gt": s.tau_gt.waypoints.tolist()}))
    for s in dataset.recognition:
        sample_lines.append(json.dumps({
            "kind": "recognition", "replay_id": s.replay_id,
            "scene_id": dataset.replays[s.replay_id].scene_id,
            "seed": dataset.replays[s.replay_id].seed,
            "frame_range": [0, s.frame],
            "instruction": _instr_json(s.instruction),
            "gold_slot": s.gold_slot}))
    with open(os.path.join(out_dir, "samples.jsonl"), "w") as f:
        f.write("\n".join(sample_lines) + "\n")
    with open(os.path.join(out_dir, "replays.jsonl"), "w") as f:
        for rid, rep in sorted(dataset.replays.items()):
            f.write(json.dumps({
                "episode_id": rep.episode_id, "scene_id": rep.scene_id,
                "seed": rep.seed,
                "frames": [{
                    "agent": [fr.agent.x, fr.agent.y, fr.agent.theta],
                    "entities": [[eid, list(xy), list(a.as_tuple())]
                                 for eid, xy, a in fr.entities],
                } for fr in rep.frames]}) + "\n")
    content_hash = hashlib.sha256("\n".join(sample_lines).encode()).hexdigest()
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump({"track_count": len(dataset.track),
                   "recognition_count": len(dataset.recognition),
                   "ratio": list(dataset.ratio), "split": dataset.split,
                   "seed": dataset.seed, "window_k": dataset.window_k,
                   "content_hash": content_hash}, f)


def load_dataset(in_dir, scenes: dict) -> Dataset:
    with open(os.path.join(in_dir, "manifest.json")) as f:
        manifest = json.load(f)
    replays = {}
    with open(os.path.join(in_dir, "replays.jsonl")) as f:
        for line in f:
            d = json.loads(line)
            replays[d["episode_id"]] = SceneReplay(
                episode_id=d["episode_id"], scene_id=d["scene_id"], seed=d["seed"],
                frames=[ReplayFrame(agent=Pose2D(*fr["agent"]),
                                    entities=[(eid, tuple(xy), AttributeVector(*a))
                                              for eid, xy, a in fr["entities"]])
                        for fr in d["frames"]])
    track, recog = [], []
    with open(os.path.join(in_dir, "samples.jsonl")) as f:
        for line in f:
            d = json.loads(line)
            if d["kind"] == "track":
                track.append(TrackSample(
                    replay_id=d["replay_id"], frame=d["frame_range"][1],
                    instruction=_instr_from_json(d["instruction"]),
                    tau_gt=Trajectory(np.array(d["tau_gt"]))))
            else:
                recog.append(RecognitionSample(
                    replay_id=d["replay_id"], frame=d["frame_range"][1],
                    instruction=_instr_from_json(d["instruction"]),
                    gold_slot=d["gold_slot"]))
    return Dataset(track=track, recognition=recog, replays=replays, scenes=scenes,
                   ratio=tuple(manifest["ratio"]), split=manifest["split"],
                   seed=manifest["seed"], window_k=manifest["window_k"])
