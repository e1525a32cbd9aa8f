"""Joint tracking+recognition co-training study.

Trains (a) a joint model on interleaved tracking and recognition batches and
(b) a track-only model on the same rollouts, then reports held-out
recognition slot accuracy and tracking SR for both.

Usage:
    python scripts/joint_cotrain_study.py --epochs 30 --out runs/cotrain
"""

import argparse
import dataclasses
import json
import os

import torch

from evtrack.bench import ModelPolicy
from evtrack.pipeline import (ExperimentConfig, TrainConfig, build_corpus,
                              build_world, evaluate_policy, train_model)
from evtrack.policy import instruction_indices


def slot_accuracy(policy, dataset, samples) -> float:
    policy.eval()
    correct = 0
    with torch.no_grad():
        for s in samples:
            toks = torch.as_tensor(dataset.recognition_tokens(s),
                                   dtype=torch.float32).unsqueeze(0)
            idx = torch.tensor([instruction_indices(s.instruction)])
            emb = policy.embed_instruction_indices(idx)
            seq = policy.build_sequence(toks, None, "recognize", instr_emb=emb)
            logits = policy.encode(seq, "recognize")
            correct += int(logits.argmax(-1).item() == s.gold_slot)
    return correct / len(samples)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--train-episodes", type=int, default=160)
    ap.add_argument("--eval-episodes", type=int, default=100)
    ap.add_argument("--holdout", type=int, default=100)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--out", default="runs/cotrain")
    args = ap.parse_args()

    cfg = ExperimentConfig(
        n_train_episodes=args.train_episodes,
        n_eval_episodes=args.eval_episodes,
        train=TrainConfig(batch_size=64, epochs=args.epochs, seed=0),
        seed=args.seed)
    world = build_world(cfg)
    dataset, anchors = build_corpus(cfg, world)

    # hold out recognition samples before training
    holdout = dataset.recognition[-args.holdout:]
    dataset.recognition = dataset.recognition[:-args.holdout]

    results = {}
    for name, ratio in (("joint", cfg.ratio), ("track_only", (1, 0))):
        run_cfg = dataclasses.replace(cfg, ratio=ratio)
        ds = dataclasses.replace(dataset, ratio=ratio,
                                 recognition=dataset.recognition
                                 if ratio[1] > 0 else [])
        policy, denoiser, _ = train_model(run_cfg, ds, anchors)
        report, _ = evaluate_policy(ModelPolicy(policy, denoiser, anchors), world)
        acc = slot_accuracy(policy, dataset, holdout)
        results[name] = {"SR": report.sr, "TR": report.tr, "slot_acc": acc}
        print(f"{name:>10}: SR={report.sr:.3f} TR={report.tr:.3f} "
              f"slot_acc={acc:.3f}")

    delta = results["joint"]["SR"] - results["track_only"]["SR"]
    print(f"\njoint - track_only SR delta: {delta:+.3f}")
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "results.json"), "w") as f:
        json.dump(results, f, indent=2)


if __name__ == "__main__":
    main()
