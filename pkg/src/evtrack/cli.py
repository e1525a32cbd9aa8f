"""Command-line entry point for the full pipeline.

Subcommands: gen-scenes, gen-episodes, collect, cluster-anchors, train,
eval, ablate, replay. Every command is deterministic given --seed; errors
exit nonzero with a machine-readable JSON line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import glob
import json
import os
import sys

import numpy as np

from .anchors import M_ANCHORS, kmeans_anchors, load_anchors, save_anchors
from .core import SeededRng, Trajectory
from .episodes import (EpisodeGenConfig, attribute_pool, generate_episode,
                       load_episode, save_episode)
from .world import generate_scene, load_scene, save_scene


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def _fail(code, message):
    print(json.dumps({"error": code, "message": message}), file=sys.stderr)
    return 1


def _load_scenes(scene_dir):
    scenes = {}
    paths = sorted(glob.glob(os.path.join(scene_dir, "*.json")))
    if not paths:
        raise CliError("missing_input", f"no scene files in {scene_dir}")
    for p in paths:
        s = load_scene(p)
        scenes[s.id] = s
    return scenes


def _load_episodes(episode_dir):
    paths = sorted(glob.glob(os.path.join(episode_dir, "*.json")))
    if not paths:
        raise CliError("missing_input", f"no episode files in {episode_dir}")
    return [load_episode(p) for p in paths]


def cmd_gen_scenes(args):
    os.makedirs(args.out, exist_ok=True)
    rng = SeededRng(args.seed)
    for i in range(args.count):
        scene = generate_scene(f"scene{i:04d}", rng.spawn(i),
                               size_range=(args.min_size, args.max_size),
                               wall_range=(args.min_walls, args.max_walls))
        save_scene(scene, os.path.join(args.out, f"{scene.id}.json"))
    print(f"wrote {args.count} scenes to {args.out}")
    return 0


def cmd_gen_episodes(args):
    scenes = _load_scenes(args.scenes)
    os.makedirs(args.out, exist_ok=True)
    cfg = EpisodeGenConfig(max_steps=args.max_steps)
    rng = SeededRng(args.seed)
    pool = attribute_pool(args.split) if args.split else None
    scene_list = sorted(scenes.values(), key=lambda s: s.id)
    for i in range(args.count):
        scene = scene_list[i % len(scene_list)]
        ep = generate_episode(scene, args.task.upper(), cfg, rng.spawn(i),
                              episode_id=f"ep{i:05d}", attr_pool=pool)
        save_episode(ep, os.path.join(args.out, f"{ep.id}.json"))
    print(f"wrote {args.count} {args.task.upper()} episodes to {args.out}")
    return 0


def cmd_collect(args):
    from .bench import ProtocolConfig, baseline_policy
    from .datagen import (NoisyExpertPolicy, collect_expert, mix, save_dataset,
                          synth_recognition)
    scenes = _load_scenes(args.scenes)
    episodes = _load_episodes(args.episodes)
    expert = baseline_policy("oracle_expert" if args.expert == "oracle" else args.expert)
    if args.noise > 0:
        expert = NoisyExpertPolicy(expert, sigma=args.noise)
    track, replays = collect_expert(episodes, scenes, expert,
                                    ProtocolConfig(max_steps=args.max_steps))
    rng = SeededRng(args.seed)
    if args.recognition > 0:
        recog, recog_replays = synth_recognition(scenes, rng, args.recognition)
        replays.update(recog_replays)
    else:
        recog = []
    ratio = tuple(int(x) for x in args.ratio.split(":"))
    dataset = mix(track, recog, replays, scenes, ratio=ratio, split=args.split,
                  seed=args.seed, window_k=args.window)
    save_dataset(dataset, args.out)
    print(f"collected {len(track)} track + {len(recog)} recognition samples "
          f"-> {args.out}")
    return 0


def cmd_cluster_anchors(args):
    samples_path = os.path.join(args.dataset, "samples.jsonl")
    if not os.path.exists(samples_path):
        raise CliError("missing_input", f"{samples_path} not found")
    trajectories = []
    with open(samples_path) as f:
        for line in f:
            d = json.loads(line)
            if d["kind"] == "track":
                trajectories.append(Trajectory(np.array(d["tau_gt"])))
    import hashlib
    with open(samples_path, "rb") as f:
        dataset_hash = hashlib.sha256(f.read()).hexdigest()
    anchor_set = kmeans_anchors(trajectories, m=args.m, rng=SeededRng(args.seed),
                                dataset_hash=dataset_hash)
    save_anchors(anchor_set, args.out)
    print(f"clustered {len(trajectories)} trajectories into {args.m} anchors "
          f"-> {args.out}")
    return 0


def _train_config(args):
    from .diffusion import TrainConfig
    base = TrainConfig().to_json()
    if args.config:
        with open(args.config) as f:
            base.update(json.load(f))
    for key in ("lr", "batch_size", "epochs", "seed"):
        val = getattr(args, key.replace("-", "_"), None)
        if val is not None:
            base[key] = val
    return TrainConfig.from_json(base)


def cmd_train(args):
    import torch
    from .checkpoint import save_checkpoint
    from .datagen import load_dataset
    from .diffusion import DENOISER_BASE, DENOISER_SMALL, DenoiserModel, train
    from .policy import EncoderConfig, TrackPolicy
    if args.dump_config:
        from .diffusion import TrainConfig
        print(json.dumps(TrainConfig().to_json(), indent=2))
        return 0
    scenes = _load_scenes(args.scenes)
    dataset = load_dataset(args.dataset, scenes)
    anchor_set = load_anchors(args.anchors)
    cfg = _train_config(args)
    torch.manual_seed(cfg.seed)
    policy = TrackPolicy(EncoderConfig(window_k=dataset.window_k))
    dcfg = DENOISER_BASE if args.model == "base" else DENOISER_SMALL
    denoiser = DenoiserModel(dcfg)
    os.makedirs(args.out, exist_ok=True)
    curve = train(dataset, anchor_set, policy, denoiser, cfg,
                  log_path=os.path.join(args.out, "loss_curve.csv"))
    save_checkpoint(os.path.join(args.out, "model.ckpt"), policy, denoiser,
                    extra={"train_config": cfg.to_json(),
                           "anchors": args.anchors})
    print(f"trained {len(curve)} steps; final loss {curve[-1]['l']:.4f} "
          f"-> {args.out}")
    return 0


def _make_policy(spec: str, ckpt_path, anchors_path):
    from .bench import ModelPolicy, baseline_policy
    if spec == "model":
        if not ckpt_path:
            raise CliError("missing_dependency", "eval with model policy needs --ckpt")
        from .checkpoint import load_checkpoint
        policy, denoiser, _ = load_checkpoint(ckpt_path)
        if not anchors_path:
            raise CliError("missing_dependency", "model policy needs --anchors")
        anchor_set = load_anchors(anchors_path)
        return ModelPolicy(policy, denoiser, anchor_set)
    return baseline_policy(spec)


def run_eval(episodes, scenes, policy, protocol):
    from .bench import evt_metrics, fansector_metrics, run_episode
    logs = []
    for ep in episodes:
        logs.append(run_episode(ep, scenes[ep.scene_id], policy, protocol))
    if protocol.protocol == "evtbench":
        return evt_metrics(logs), logs
    return fansector_metrics(logs), logs


def cmd_eval(args):
    from .bench import ProtocolConfig
    scenes = _load_scenes(args.scenes)
    episodes = _load_episodes(args.episodes)
    protocol = ProtocolConfig(protocol=args.protocol, max_steps=args.max_steps)
    ckpt = os.path.join(args.ckpt, "model.ckpt") if args.ckpt and os.path.isdir(args.ckpt) \
        else args.ckpt
    policy = _make_policy(args.policy, ckpt, args.anchors)
    report, logs = run_eval(episodes, scenes, policy, protocol)
    os.makedirs(args.report, exist_ok=True)
    with open(os.path.join(args.report, "metrics.json"), "w") as f:
        json.dump(report.to_json(), f, indent=2)
    with open(os.path.join(args.report, "per_episode.csv"), "w", newline="") as f:
        if args.protocol == "evtbench":
            cols = ["episode_id", "task", "success", "tr", "collision", "length", "reason"]
        else:
            cols = ["episode_id", "task", "success", "length", "reason"]
        w = csv.DictWriter(f, fieldnames=cols)
        w.writeheader()
        for row in report.per_episode:
            w.writerow(row)
    if args.save_logs:
        from .bench import save_steplog
        log_dir = os.path.join(args.report, "logs")
        os.makedirs(log_dir, exist_ok=True)
        for log in logs:
            save_steplog(log, os.path.join(log_dir, f"{log.episode_id}.jsonl"))
    summary = {"SR": report.sr, "TR": report.tr, "CR": report.cr, "EL": report.el}
    print(json.dumps({k: v for k, v in summary.items() if v is not None}))
    return 0


def cmd_ablate(args):
    from .ablate import run_ablation
    grid = args.grid.split(",") if args.grid else None
    result = run_ablation(args.axis, grid, args.scenes, args.episodes,
                          args.dataset, args.report, seed=args.seed,
                          epochs=args.epochs)
    print(json.dumps(result))
    return 0


def cmd_replay(args):
    from .bench import load_steplog, render_svg
    log = load_steplog(args.log)
    scene = load_scene(args.scene) if args.scene else None
    svg = render_svg(log, scene)
    with open(args.svg, "w") as f:
        f.write(svg)
    print(f"wrote {args.svg}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="evtrack")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scenes")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--min-size", type=float, default=10.0)
    g.add_argument("--max-size", type=float, default=20.0)
    g.add_argument("--min-walls", type=int, default=0)
    g.add_argument("--max-walls", type=int, default=2)
    g.set_defaults(func=cmd_gen_scenes)

    g = sub.add_parser("gen-episodes")
    g.add_argument("--scenes", required=True)
    g.add_argument("--task", choices=["stt", "dt", "at"], required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--split", choices=["train", "test"], default=None)
    g.add_argument("--max-steps", type=int, default=500)
    g.set_defaults(func=cmd_gen_episodes)

    g = sub.add_parser("collect")
    g.add_argument("--episodes", required=True)
    g.add_argument("--scenes", required=True)
    g.add_argument("--expert", default="oracle")
    g.add_argument("--noise", type=float, default=0.0,
                   help="OU steering-noise sigma on the expert")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--recognition", type=int, default=0)
    g.add_argument("--ratio", default="1:1")
    g.add_argument("--split", default="train")
    g.add_argument("--window", type=int, default=32)
    g.add_argument("--max-steps", type=int, default=500)
    g.set_defaults(func=cmd_collect)

    g = sub.add_parser("cluster-anchors")
    g.add_argument("--dataset", required=True)
    g.add_argument("--m", type=int, default=M_ANCHORS)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_cluster_anchors)

    g = sub.add_parser("train")
    g.add_argument("--dataset")
    g.add_argument("--scenes")
    g.add_argument("--anchors")
    g.add_argument("--config")
    g.add_argument("--out")
    g.add_argument("--model", choices=["small", "base"], default="small")
    g.add_argument("--lr", type=float, default=None)
    g.add_argument("--batch-size", type=int, default=None)
    g.add_argument("--epochs", type=int, default=None)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--dump-config", action="store_true")
    g.set_defaults(func=cmd_train)

    g = sub.add_parser("eval")
    g.add_argument("--ckpt")
    g.add_argument("--anchors")
    g.add_argument("--episodes", required=True)
    g.add_argument("--scenes", required=True)
    g.add_argument("--protocol", choices=["evtbench", "fansector"], default="evtbench")
    g.add_argument("--policy", default="model",
                   choices=["model", "random", "greedy_bearing", "oracle_expert"])
    g.add_argument("--report", required=True)
    g.add_argument("--max-steps", type=int, default=500)
    g.add_argument("--save-logs", action="store_true")
    g.set_defaults(func=cmd_eval)

    g = sub.add_parser("ablate")
    g.add_argument("--axis", required=True,
                   choices=["ratio", "history", "horizon", "action-model"])
    g.add_argument("--grid")
    g.add_argument("--scenes", required=True)
    g.add_argument("--episodes", required=True)
    g.add_argument("--dataset", required=True)
    g.add_argument("--report", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--epochs", type=int, default=1)
    g.set_defaults(func=cmd_ablate)

    g = sub.add_parser("replay")
    g.add_argument("--log", required=True)
    g.add_argument("--svg", required=True)
    g.add_argument("--scene")
    g.set_defaults(func=cmd_replay)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        return _fail(e.code, str(e))
    except FileNotFoundError as e:
        return _fail("missing_input", str(e))
    except Exception as e:  # schema errors etc.
        return _fail(type(e).__name__, str(e))


if __name__ == "__main__":
    sys.exit(main())
