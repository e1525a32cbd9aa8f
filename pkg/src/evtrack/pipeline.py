"""End-to-end experiment pipeline: world -> corpus -> training -> evaluation.

One config drives a whole desk-scale experiment (scene generation, noisy
expert data collection, anchor clustering, joint training, benchmark
evaluation). Shared by the runnable scripts and the acceptance tests so
both exercise exactly the same path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .anchors import M_ANCHORS, kmeans_anchors
from .bench import ModelPolicy, ProtocolConfig, baseline_policy, evt_metrics, run_episode
from .core import SeededRng
from .datagen import NoisyExpertPolicy, collect_expert, mix, synth_recognition
from .diffusion import DenoiserConfig, DenoiserModel, TrainConfig, train
from .episodes import EpisodeGenConfig, generate_episode
from .policy import EncoderConfig, TrackPolicy
from .world import generate_scene

DENOISER_TINY = DenoiserConfig(depth=3, dim=192, heads=4)


@dataclass(frozen=True)
class ExperimentConfig:
    task: str = "STT"
    n_train_scenes: int = 6
    n_eval_scenes: int = 3
    scene_size: tuple = (10, 14)
    scene_walls: tuple = (0, 1)
    n_train_episodes: int = 160
    n_eval_episodes: int = 100
    max_steps: int = 200
    intermediate_waypoints: tuple = (0, 1)
    target_speed: tuple = (1.0, 1.5)
    noise_sigma: float = 0.3
    n_recognition: int = 700
    ratio: tuple = (1, 1)
    window_k: int = 8
    m_anchors: int = M_ANCHORS
    encoder: EncoderConfig | None = None       # derived from window_k if None
    denoiser: DenoiserConfig = field(default_factory=lambda: DENOISER_TINY)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        batch_size=64, epochs=30, seed=0))
    seed: int = 42

    def encoder_config(self) -> EncoderConfig:
        return self.encoder or EncoderConfig(window_k=self.window_k)


@dataclass
class World:
    scenes: dict                 # id -> Scene, train and eval together
    train_episodes: list
    eval_episodes: list
    protocol: ProtocolConfig


def build_world(cfg: ExperimentConfig) -> World:
    """Disjoint train/eval scenes; episodes round-robin over their scenes."""
    rng = SeededRng(cfg.seed)
    gen = EpisodeGenConfig(intermediate_waypoints=cfg.intermediate_waypoints,
                           speed_range=cfg.target_speed,
                           max_steps=cfg.max_steps)
    train_scenes = [generate_scene(f"train{i}", rng.spawn(i),
                                   size_range=cfg.scene_size,
                                   wall_range=cfg.scene_walls)
                    for i in range(cfg.n_train_scenes)]
    eval_scenes = [generate_scene(f"eval{i}", rng.spawn(50 + i),
                                  size_range=cfg.scene_size,
                                  wall_range=cfg.scene_walls)
                   for i in range(cfg.n_eval_scenes)]
    train_eps = [generate_episode(train_scenes[i % len(train_scenes)], cfg.task,
                                  gen, rng.spawn(1000 + i),
                                  episode_id=f"train-ep{i}")
                 for i in range(cfg.n_train_episodes)]
    eval_eps = [generate_episode(eval_scenes[i % len(eval_scenes)], cfg.task,
                                 gen, rng.spawn(5000 + i),
                                 episode_id=f"eval-ep{i}")
                for i in range(cfg.n_eval_episodes)]
    scenes = {s.id: s for s in train_scenes + eval_scenes}
    return World(scenes=scenes, train_episodes=train_eps, eval_episodes=eval_eps,
                 protocol=ProtocolConfig(max_steps=cfg.max_steps))


def build_corpus(cfg: ExperimentConfig, world: World):
    """Noisy-expert rollouts plus synthetic recognition -> (dataset, anchors).

    Recognition synthesis only sees the training scenes."""
    rng = SeededRng(cfg.seed)
    expert = NoisyExpertPolicy(baseline_policy("oracle_expert"),
                               sigma=cfg.noise_sigma)
    track, replays = collect_expert(world.train_episodes, world.scenes, expert,
                                    world.protocol, window_k=cfg.window_k)
    train_scenes = {e.scene_id for e in world.train_episodes}
    if cfg.n_recognition > 0 and cfg.ratio[1] > 0:
        recog, rrep = synth_recognition(
            {sid: world.scenes[sid] for sid in train_scenes},
            rng.spawn(77), cfg.n_recognition)
        replays.update(rrep)
    else:
        recog = []
    dataset = mix(track, recog, replays, world.scenes, ratio=cfg.ratio,
                  seed=cfg.seed, window_k=cfg.window_k)
    anchors = kmeans_anchors([s.tau_gt for s in track], m=cfg.m_anchors,
                             rng=SeededRng(cfg.seed).spawn(9))
    return dataset, anchors


def train_model(cfg: ExperimentConfig, dataset, anchors):
    """Joint (or track-only, if ratio drops recognition) training run."""
    import torch
    torch.manual_seed(cfg.train.seed)
    policy = TrackPolicy(cfg.encoder_config())
    denoiser = DenoiserModel(cfg.denoiser)
    curve = train(dataset, anchors, policy, denoiser, cfg.train)
    return policy, denoiser, curve


def evaluate_policy(policy, world: World, episodes=None):
    """Run a policy over episodes (default: the held-out set) -> (report, logs)."""
    episodes = world.eval_episodes if episodes is None else episodes
    logs = [run_episode(e, world.scenes[e.scene_id], policy, world.protocol)
            for e in episodes]
    return evt_metrics(logs), logs


def evaluate_baseline(kind: str, world: World, episodes=None):
    return evaluate_policy(baseline_policy(kind), world, episodes)


@dataclass
class ExperimentResult:
    world: World
    dataset: object
    anchors: object
    policy: object
    denoiser: object
    curve: list
    report: object
    logs: list


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    world = build_world(cfg)
    dataset, anchors = build_corpus(cfg, world)
    policy, denoiser, curve = train_model(cfg, dataset, anchors)
    report, logs = evaluate_policy(ModelPolicy(policy, denoiser, anchors), world)
    return ExperimentResult(world=world, dataset=dataset, anchors=anchors,
                            policy=policy, denoiser=denoiser, curve=curve,
                            report=report, logs=logs)
