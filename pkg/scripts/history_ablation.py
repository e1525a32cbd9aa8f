"""History-window ablation on ambiguous tracking (AT) episodes.

Every distractor looks identical to the target, so a single frame cannot
say which person to follow; only the observation history disambiguates.
Trains one model per window size and reports held-out SR/TR.

Usage:
    python scripts/history_ablation.py --windows 1,32 --epochs 30
"""

import argparse
import json
import os
import time

from evtrack.bench import ModelPolicy
from evtrack.pipeline import (ExperimentConfig, TrainConfig, build_corpus,
                              build_world, evaluate_policy, train_model)


def at_config(window_k, args):
    return ExperimentConfig(
        task="AT",
        n_train_episodes=args.train_episodes,
        n_eval_episodes=args.eval_episodes,
        noise_sigma=args.noise,
        n_recognition=0, ratio=(1, 0),          # track-only: isolate history
        window_k=window_k,
        train=TrainConfig(batch_size=64, epochs=args.epochs, seed=0),
        seed=args.seed)


def single_distractor(episodes):
    return [e for e in episodes if len(e.distractors) == 1]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--windows", default="1,32")
    ap.add_argument("--train-episodes", type=int, default=160)
    ap.add_argument("--eval-episodes", type=int, default=100)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--noise", type=float, default=0.3)
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--out", default="runs/history_ablation")
    args = ap.parse_args()

    results = []
    for k in (int(x) for x in args.windows.split(",")):
        cfg = at_config(k, args)
        t0 = time.time()
        world = build_world(cfg)
        world.train_episodes = single_distractor(world.train_episodes)
        world.eval_episodes = single_distractor(world.eval_episodes)
        dataset, anchors = build_corpus(cfg, world)
        policy, denoiser, _ = train_model(cfg, dataset, anchors)
        report, _ = evaluate_policy(ModelPolicy(policy, denoiser, anchors), world)
        results.append({"window_k": k, "SR": report.sr, "TR": report.tr,
                        "episodes": len(world.eval_episodes),
                        "elapsed_s": time.time() - t0})
        print(f"k={k:3d}  SR={report.sr:.3f}  TR={report.tr:.3f}  "
              f"({results[-1]['elapsed_s']:.0f}s)")

    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "results.json"), "w") as f:
        json.dump(results, f, indent=2)
    if len(results) >= 2:
        delta = results[-1]["SR"] - results[0]["SR"]
        print(f"\nSR delta (k={results[-1]['window_k']} vs "
              f"k={results[0]['window_k']}): {delta:+.3f}")


if __name__ == "__main__":
    main()
