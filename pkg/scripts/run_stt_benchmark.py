"""Desk-scale STT benchmark: train the anchor-diffusion tracker and compare
it against the random, greedy-bearing, and oracle-expert baselines on
held-out episodes.

Usage:
    python scripts/run_stt_benchmark.py --epochs 30 --eval-episodes 100 \
        --out runs/stt
"""

import argparse
import csv
import json
import os
import time

from evtrack.checkpoint import save_checkpoint
from evtrack.pipeline import (ExperimentConfig, TrainConfig, evaluate_baseline,
                              run_experiment)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--train-episodes", type=int, default=160)
    ap.add_argument("--eval-episodes", type=int, default=100)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--noise", type=float, default=0.3)
    ap.add_argument("--window", type=int, default=8)
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--baselines", default="random,greedy_bearing,oracle_expert")
    ap.add_argument("--out", default="runs/stt")
    args = ap.parse_args()

    cfg = ExperimentConfig(
        n_train_episodes=args.train_episodes,
        n_eval_episodes=args.eval_episodes,
        noise_sigma=args.noise,
        window_k=args.window,
        train=TrainConfig(batch_size=64, epochs=args.epochs, seed=0),
        seed=args.seed)

    t0 = time.time()
    result = run_experiment(cfg)
    elapsed = time.time() - t0

    rows = [("model", result.report.sr, result.report.tr, result.report.cr)]
    for kind in filter(None, args.baselines.split(",")):
        rep, _ = evaluate_baseline(kind, result.world)
        rows.append((kind, rep.sr, rep.tr, rep.cr))

    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(os.path.join(args.out, "model.ckpt"),
                    result.policy, result.denoiser)
    with open(os.path.join(args.out, "loss_curve.csv"), "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(result.curve[0]))
        w.writeheader()
        w.writerows(result.curve)
    with open(os.path.join(args.out, "results.json"), "w") as f:
        json.dump({"elapsed_s": elapsed, "track_samples": len(result.dataset.track),
                   "results": [{"policy": n, "SR": sr, "TR": tr, "CR": cr}
                               for n, sr, tr, cr in rows]}, f, indent=2)

    print(f"\ntrained on {len(result.dataset.track)} track samples "
          f"in {elapsed:.0f}s\n")
    print(f"{'policy':>16}  {'SR':>5}  {'TR':>5}  {'CR':>5}")
    for name, sr, tr, cr in rows:
        print(f"{name:>16}  {sr:5.3f}  {tr:5.3f}  {cr:5.3f}")


if __name__ == "__main__":
    main()
