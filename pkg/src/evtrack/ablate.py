"""Ablation sweeps over training and inference choices.

Each axis trains one model per grid value on the same dataset and evaluates
it on the same episode set, so only the swept factor differs between rows:

  ratio        track:recognition mixing ratio
  history      observation window length k
  horizon      waypoints of the predicted trajectory the controller obeys
  action-model denoiser architecture (transformer sizes or a per-anchor MLP)
"""

from __future__ import annotations

import json
import os
from dataclasses import replace

import numpy as np
import torch
import torch.nn as nn

from .anchors import kmeans_anchors
from .bench import ModelPolicy, ProtocolConfig, evt_metrics, run_episode
from .core import N_W, SeededRng, Trajectory, recompute_headings
from .diffusion import (DENOISER_BASE, DENOISER_SMALL, DenoiserModel,
                        TrainConfig, timestep_embedding, train)
from .policy import EncoderConfig, TrackPolicy

DEFAULT_GRIDS = {
    "ratio": ["1:1", "1:0"],
    "history": ["32", "8", "1"],
    "horizon": ["10", "5", "2"],
    "action-model": ["small", "mlp"],
}


class MlpDenoiser(nn.Module):
    """Per-anchor MLP baseline: no cross-anchor attention at all."""

    def __init__(self, cond_dim: int = 128, hidden: int = 384, depth: int = 3):
        super().__init__()
        self.cond_dim = cond_dim
        d_in = 2 * N_W + cond_dim + hidden
        layers = []
        d = d_in
        for _ in range(depth):
            layers += [nn.Linear(d, hidden), nn.GELU()]
            d = hidden
        self.body = nn.Sequential(*layers)
        self.time_dim = hidden
        self.reg_head = nn.Linear(hidden, 2 * N_W)
        self.score_head = nn.Linear(hidden, 1)

    def forward(self, noised, condition, t):
        b, m, _ = noised.shape
        temb = timestep_embedding(t.to(noised.dtype), self.time_dim)
        cond = torch.cat([condition, temb], dim=-1)
        x = torch.cat([noised, cond.unsqueeze(1).expand(-1, m, -1)], dim=-1)
        h = self.body(x)
        return self.reg_head(h), self.score_head(h).squeeze(-1)


class TruncatedHorizonPolicy(ModelPolicy):
    """Model policy that holds the h-th waypoint for the rest of the plan."""

    def __init__(self, policy, denoiser, anchor_set, horizon: int, **kw):
        super().__init__(policy, denoiser, anchor_set, **kw)
        if not (1 <= horizon <= N_W):
            raise ValueError(f"horizon must be in [1, {N_W}]")
        self.horizon = horizon

    def act(self, ctx):
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
        traj = select_top1(trajs, scores)
        xy = traj.xy.copy()
        xy[self.horizon:] = xy[self.horizon - 1]
        return pure_pursuit(recompute_headings(xy), self.pursuit_cfg)


def _make_denoiser(kind: str):
    if kind == "small":
        return DenoiserModel(DENOISER_SMALL)
    if kind == "base":
        return DenoiserModel(DENOISER_BASE)
    if kind == "mlp":
        return MlpDenoiser()
    raise ValueError(f"unknown action model {kind}")


def _train_one(dataset, anchor_set, train_cfg, window_k=None, denoiser_kind="small"):
    torch.manual_seed(train_cfg.seed)
    policy = TrackPolicy(EncoderConfig(window_k=window_k or dataset.window_k))
    denoiser = _make_denoiser(denoiser_kind)
    train(dataset, anchor_set, policy, denoiser, train_cfg)
    return policy, denoiser


def run_ablation(axis: str, grid, scenes_dir, episodes_dir, dataset_dir,
                 report_dir, seed: int = 0, epochs: int = 1,
                 protocol: ProtocolConfig | None = None):
    """Train and evaluate one model per grid value; write report rows.

    Returns {"axis": ..., "rows": [{"value", "SR", "TR", "CR"}, ...]}.
    """
    from .cli import _load_episodes, _load_scenes
    from .datagen import load_dataset
    if axis not in DEFAULT_GRIDS:
        raise ValueError(f"unknown ablation axis {axis}")
    grid = grid or DEFAULT_GRIDS[axis]
    scenes = _load_scenes(scenes_dir)
    episodes = _load_episodes(episodes_dir)
    dataset = load_dataset(dataset_dir, scenes)
    protocol = protocol or ProtocolConfig()
    anchor_set = kmeans_anchors([s.tau_gt for s in dataset.track],
                                rng=SeededRng(seed))
    base_cfg = TrainConfig(epochs=epochs, seed=seed)
    rows = []
    shared = None   # (policy, denoiser) reused across horizon values
    for value in grid:
        if axis == "ratio":
            rt, rr = (int(x) for x in value.split(":"))
            ds = replace(dataset, ratio=(rt, rr),
                         recognition=dataset.recognition if rr > 0 else [])
            policy, denoiser = _train_one(ds, anchor_set, base_cfg)
            runner = ModelPolicy(policy, denoiser, anchor_set)
        elif axis == "history":
            k = int(value)
            ds = replace(dataset, window_k=k, _token_cache=dataset._token_cache)
            policy, denoiser = _train_one(ds, anchor_set, base_cfg, window_k=k)
            runner = ModelPolicy(policy, denoiser, anchor_set)
        elif axis == "horizon":
            if shared is None:
                shared = _train_one(dataset, anchor_set, base_cfg)
            runner = TruncatedHorizonPolicy(shared[0], shared[1], anchor_set,
                                            horizon=int(value))
        else:  # action-model
            policy, denoiser = _train_one(dataset, anchor_set, base_cfg,
                                          denoiser_kind=value)
            runner = ModelPolicy(policy, denoiser, anchor_set)
        logs = [run_episode(ep, scenes[ep.scene_id], runner, protocol)
                for ep in episodes]
        report = evt_metrics(logs)
        rows.append({"value": value, "SR": report.sr, "TR": report.tr,
                     "CR": report.cr})
    result = {"axis": axis, "rows": rows}
    os.makedirs(report_dir, exist_ok=True)
    with open(os.path.join(report_dir, f"ablation_{axis}.json"), "w") as f:
        json.dump(result, f, indent=2)
    return result
