"""Anchor-based diffusion action model.

A truncated noise schedule perturbs the trajectory anchors only lightly
(at most T_train of T total steps), so a transformer denoiser conditioned
on the tracking condition vector can recover clean trajectories in two
deterministic DDIM steps. The denoiser predicts the clean normalized
trajectory directly (x0 parameterization) together with one classification
logit per anchor; the top-1 scored trajectory is the action output.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .anchors import AnchorSet, nearest_anchor
from .core import N_W, SeededRng, Trajectory, recompute_headings

T_TOTAL = 1000
T_TRAIN = 50
T_INFER = 10
N_STEP = 2
LOGIT_CLAMP = 15.0


@dataclass(frozen=True)
class DiffusionSchedule:
    betas: np.ndarray        # (T,), betas[i] is beta_{i+1}
    alpha_bars: np.ndarray   # (T+1,), alpha_bars[0] = 1
    t_total: int = T_TOTAL
    t_train: int = T_TRAIN
    t_infer: int = T_INFER
    n_step: int = N_STEP


def make_schedule(t_total: int = T_TOTAL, t_train: int = T_TRAIN,
                  t_infer: int = T_INFER, n_step: int = N_STEP) -> DiffusionSchedule:
    """Linear betas 1e-4 -> 0.02 with cumulative alpha products."""
    if t_total < 1 or not (1 <= t_train <= t_total) or not (1 <= t_infer <= t_train):
        raise ValueError("invalid schedule sizes")
    betas = np.linspace(1e-4, 0.02, t_total)
    alpha_bars = np.empty(t_total + 1)
    alpha_bars[0] = 1.0
    alpha_bars[1:] = np.cumprod(1.0 - betas)
    return DiffusionSchedule(betas=betas, alpha_bars=alpha_bars, t_total=t_total,
                             t_train=t_train, t_infer=t_infer, n_step=n_step)


@dataclass
class NoisedAnchors:
    noised: np.ndarray   # (M, 2*N_W) normalized
    t: int
    eps: np.ndarray      # the Gaussian draws used


def perturb(anchor_set: AnchorSet, t: int, rng: SeededRng,
            schedule: DiffusionSchedule) -> NoisedAnchors:
    """Forward-noise every anchor independently to step t."""
    if not (1 <= t <= schedule.t_train):
        raise ValueError(f"t={t} outside [1, {schedule.t_train}]")
    x0 = anchor_set.normalized_xy()
    eps = rng.normal(size=x0.shape)
    ab = schedule.alpha_bars[t]
    noised = math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps
    return NoisedAnchors(noised=noised, t=t, eps=eps)


# --- denoiser ------------------------------------------------------------

@dataclass(frozen=True)
class DenoiserConfig:
    depth: int = 6
    dim: int = 384
    heads: int = 4
    cond_dim: int = 128
    mlp_ratio: int = 4
    max_anchors: int = 64

    def to_json(self):
        return {"depth": self.depth, "dim": self.dim, "heads": self.heads,
                "cond_dim": self.cond_dim, "mlp_ratio": self.mlp_ratio,
                "max_anchors": self.max_anchors}

    @staticmethod
    def from_json(d):
        return DenoiserConfig(**d)


DENOISER_SMALL = DenoiserConfig(depth=6, dim=384, heads=4)
DENOISER_BASE = DenoiserConfig(depth=12, dim=768, heads=12)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of diffusion step indices."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype,
                                                        device=t.device) / half)
    args = t[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class AdaLNBlock(nn.Module):
    """Transformer block with adaptive-norm conditioning (shift/scale/gate)."""

    def __init__(self, dim, heads, mlp_ratio):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(dim, elementwise_affine=False)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.ln2 = nn.LayerNorm(dim, elementwise_affine=False)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))
        self.modulation = nn.Linear(dim, 6 * dim)
        nn.init.zeros_(self.modulation.weight)
        nn.init.zeros_(self.modulation.bias)

    def forward(self, x, c):
        shift1, scale1, gate1, shift2, scale2, gate2 = self.modulation(c).chunk(6, dim=-1)
        b, l, d = x.shape
        h = self.heads
        y = self.ln1(x) * (1 + scale1[:, None]) + shift1[:, None]
        q, k, v = self.qkv(y).chunk(3, dim=-1)
        q = q.view(b, l, h, d // h).transpose(1, 2)
        k = k.view(b, l, h, d // h).transpose(1, 2)
        v = v.view(b, l, h, d // h).transpose(1, 2)
        attn = F.scaled_dot_product_attention(q, k, v)
        attn = attn.transpose(1, 2).reshape(b, l, d)
        x = x + gate1[:, None] * self.proj(attn)
        y = self.ln2(x) * (1 + scale2[:, None]) + shift2[:, None]
        x = x + gate2[:, None] * self.mlp(y)
        return x


class DenoiserModel(nn.Module):
    """DiT-style denoiser over anchor tokens.

    Each token carries a learned index embedding: forward noising keeps the
    anchor order, and the score labels are per-anchor-index, so without an
    identity channel the noised coordinates are the only clue to which anchor
    a token is — at large t that clue is scrambled and the score loss turns
    into label noise."""

    def __init__(self, cfg: DenoiserConfig = DENOISER_SMALL):
        super().__init__()
        self.cfg = cfg
        d = cfg.dim
        self.anchor_embed = nn.Linear(2 * N_W, d)
        self.index_emb = nn.Parameter(torch.zeros(cfg.max_anchors, d))
        nn.init.normal_(self.index_emb, std=0.02)
        self.cond_proj = nn.Linear(cfg.cond_dim, d)
        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.blocks = nn.ModuleList(
            [AdaLNBlock(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)])
        self.ln_f = nn.LayerNorm(d, elementwise_affine=False)
        self.final_modulation = nn.Linear(d, 2 * d)
        nn.init.zeros_(self.final_modulation.weight)
        nn.init.zeros_(self.final_modulation.bias)
        self.reg_head = nn.Linear(d, 2 * N_W)
        self.score_head = nn.Linear(d, 1)

    def forward(self, noised: torch.Tensor, condition: torch.Tensor,
                t: torch.Tensor):
        """noised (B, M, 2*N_W) normalized; condition (B, cond_dim); t (B,).

        Returns (tau_hat (B, M, 2*N_W) normalized, score_logits (B, M)).
        """
        m = noised.shape[1]
        if m > self.cfg.max_anchors:
            raise ValueError(f"{m} anchors exceed max_anchors={self.cfg.max_anchors}")
        x = self.anchor_embed(noised) + self.index_emb[:m]
        c = self.cond_proj(condition) + self.time_mlp(
            timestep_embedding(t.to(x.dtype), self.cfg.dim))
        for blk in self.blocks:
            x = blk(x, c)
        shift, scale = self.final_modulation(c).chunk(2, dim=-1)
        x = self.ln_f(x) * (1 + scale[:, None]) + shift[:, None]
        return self.reg_head(x), self.score_head(x).squeeze(-1)


def denoise_forward(model: DenoiserModel, noised: NoisedAnchors,
                    condition: torch.Tensor, anchor_set: AnchorSet):
    """Single-sample denoise: returns (list of Trajectory, scores (M,))."""
    with torch.no_grad():
        p = next(model.parameters())
        x = torch.as_tensor(noised.noised, dtype=p.dtype, device=p.device).unsqueeze(0)
        cond = condition.reshape(1, -1).to(p.dtype)
        t = torch.tensor([noised.t], dtype=p.dtype)
        tau_hat, logits = model(x, cond, t)
    trajs = [recompute_headings((w.reshape(N_W, 2) * anchor_set.rho))
             for w in tau_hat[0].double().cpu().numpy()]
    return trajs, logits[0].double().cpu().numpy()


# --- losses --------------------------------------------------------------

@dataclass(frozen=True)
class LossConfig:
    lam: float = 100.0   # score-loss weight within the tracking loss
    alpha: float = 1.0   # recognition weight in the total loss

    def __post_init__(self):
        if self.lam <= 0 or self.alpha <= 0:
            raise ValueError("loss weights must be positive")


def track_loss(tau_hat: torch.Tensor, score_logits: torch.Tensor,
               tau_gt: torch.Tensor, positive_index: torch.Tensor,
               cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Per-sample tracking loss (B,): gated MSE at the positive anchor plus
    lam * summed BCE over all anchor logits (clamped for stability)."""
    b, m, _ = tau_hat.shape
    pos = positive_index.view(-1)
    idx = pos.view(b, 1, 1).expand(-1, 1, tau_hat.shape[-1])
    tau_pos = tau_hat.gather(1, idx).squeeze(1)
    mse = ((tau_pos - tau_gt) ** 2).mean(dim=-1)
    labels = torch.zeros(b, m, dtype=tau_hat.dtype, device=tau_hat.device)
    labels[torch.arange(b), pos] = 1.0
    logits = score_logits.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
    bce = F.binary_cross_entropy_with_logits(logits, labels, reduction="none").sum(dim=-1)
    return mse + cfg.lam * bce


def total_loss(track_losses: torch.Tensor | None,
               recognition_losses: torch.Tensor | None,
               cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Mean tracking loss + alpha * mean recognition loss; empty branch -> 0."""
    if track_losses is None and recognition_losses is None:
        raise ValueError("at least one batch must be non-empty")
    zero = None
    total = 0.0
    if track_losses is not None and track_losses.numel() > 0:
        total = total + track_losses.mean()
        zero = track_losses
    if recognition_losses is not None and recognition_losses.numel() > 0:
        total = total + cfg.alpha * recognition_losses.mean()
        zero = recognition_losses
    if isinstance(total, float):
        return torch.zeros((), dtype=zero.dtype if zero is not None else torch.float32)
    return total


# --- sampling ------------------------------------------------------------

def ddim_substeps(schedule: DiffusionSchedule):
    """Evenly spaced sub-schedule from t_infer down to 0, n_step intervals."""
    steps = np.linspace(schedule.t_infer, 0, schedule.n_step + 1)
    return [int(round(s)) for s in steps]


def ddim_sample(model, anchor_set: AnchorSet, condition: torch.Tensor,
                schedule: DiffusionSchedule, rng: SeededRng,
                noised: NoisedAnchors | None = None):
    """Deterministic (eta = 0) DDIM over the truncated sub-schedule.

    `model` maps (noised (B,M,D), condition (B,C), t (B,)) to
    (tau_hat, score_logits); scores come from the final denoise call.
    Returns (list of Trajectory, scores (M,)).
    """
    if noised is None:
        noised = perturb(anchor_set, schedule.t_infer, rng, schedule)
    steps = ddim_substeps(schedule)
    p = next(model.parameters()) if isinstance(model, nn.Module) else None
    dtype = p.dtype if p is not None else torch.float64
    x = torch.as_tensor(noised.noised, dtype=dtype).unsqueeze(0)
    cond = condition.reshape(1, -1).to(dtype)
    tau_hat = logits = None
    with torch.no_grad():
        for t_cur, t_next in zip(steps, steps[1:]):
            ab_t = schedule.alpha_bars[t_cur]
            ab_n = schedule.alpha_bars[t_next]
            tau_hat, logits = model(x, cond, torch.tensor([t_cur], dtype=dtype))
            eps_hat = (x - math.sqrt(ab_t) * tau_hat) / math.sqrt(1.0 - ab_t)
            x = math.sqrt(ab_n) * tau_hat + math.sqrt(1.0 - ab_n) * eps_hat
    out = x[0].double().cpu().numpy()
    trajs = [recompute_headings(w.reshape(N_W, 2) * anchor_set.rho) for w in out]
    return trajs, logits[0].double().cpu().numpy()


def select_top1(trajectories, scores) -> Trajectory:
    """Trajectory at the argmax score; ties break to the lowest index."""
    scores = np.asarray(scores)
    if len(trajectories) < 1 or len(trajectories) != len(scores):
        raise ValueError("need matching non-empty trajectories and scores")
    return trajectories[int(scores.argmax())]


# --- training ------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    batch_size: int = 64
    weight_decay: float = 0.01
    warmup_frac: float = 0.05
    epochs: int = 1
    grad_clip: float = 1.0
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)

    def to_json(self):
        return {"lr": self.lr, "batch_size": self.batch_size,
                "weight_decay": self.weight_decay, "warmup_frac": self.warmup_frac,
                "epochs": self.epochs, "grad_clip": self.grad_clip, "seed": self.seed,
                "lam": self.loss.lam, "alpha": self.loss.alpha}

    @staticmethod
    def from_json(d):
        d = dict(d)
        loss = LossConfig(lam=d.pop("lam", 100.0), alpha=d.pop("alpha", 1.0))
        return TrainConfig(loss=loss, **d)


class TrainingDiverged(Exception):
    pass


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warm-up to the peak followed by cosine decay."""
    warmup = max(1, int(cfg.warmup_frac * total_steps))
    if step < warmup:
        return cfg.lr * (step + 1) / warmup
    progress = (step - warmup) / max(1, total_steps - warmup)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def train(dataset, anchor_set: AnchorSet, policy, model: DenoiserModel,
          cfg: TrainConfig = TrainConfig(), log_path=None):
    """Joint training of the encoder-policy and the denoiser.

    `dataset` must provide iter_batches(batch_size, epoch) yielding dicts
    with optional keys "track" and "recognition" (see datagen.Dataset).
    Returns the per-step loss curve as a list of dicts.
    """
    from .policy import recognition_loss

    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    params = list(policy.parameters()) + list(model.parameters())
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    anchors_t = torch.as_tensor(anchor_set.normalized_xy(), dtype=torch.float32)
    m = anchor_set.m
    steps_per_epoch = dataset.batches_per_epoch(cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    curve = []
    writer = None
    if log_path is not None:
        f = open(log_path, "w", newline="")
        writer = csv.writer(f)
        writer.writerow(["step", "l_track", "l_text", "l", "lr"])
    step = 0
    schedule = make_schedule()
    ab = torch.as_tensor(schedule.alpha_bars, dtype=torch.float32)
    try:
        for epoch in range(cfg.epochs):
            for batch in dataset.iter_batches(cfg.batch_size, epoch, policy.cfg):
                lr = lr_at(step, total_steps, cfg)
                for g in opt.param_groups:
                    g["lr"] = lr
                track_l = recog_l = None
                if "track" in batch:
                    tokens = torch.as_tensor(batch["track"]["tokens"], dtype=torch.float32)
                    instr = torch.as_tensor(batch["track"]["instr"], dtype=torch.long)
                    tau_gt = torch.as_tensor(batch["track"]["tau_gt_norm"],
                                             dtype=torch.float32)
                    # nearest anchor (mean squared xy distance) is the positive
                    pos = ((anchors_t.unsqueeze(0) - tau_gt.unsqueeze(1)) ** 2
                           ).mean(dim=-1).argmin(dim=1)
                    b = tokens.shape[0]
                    instr_emb = policy.embed_instruction_indices(instr)
                    seq = policy.build_sequence(tokens, None, "track", instr_emb=instr_emb)
                    condition = policy.encode(seq, "track")
                    t = torch.randint(1, schedule.t_train + 1, (b,), generator=gen)
                    eps = torch.randn(b, m, 2 * N_W, generator=gen)
                    ab_t = ab[t].view(b, 1, 1)
                    noised = (ab_t.sqrt() * anchors_t.unsqueeze(0)
                              + (1 - ab_t).sqrt() * eps)
                    tau_hat, logits = model(noised, condition, t.to(torch.float32))
                    track_l = track_loss(tau_hat, logits, tau_gt, pos, cfg.loss)
                if "recognition" in batch:
                    tokens = torch.as_tensor(batch["recognition"]["tokens"],
                                             dtype=torch.float32)
                    instr = torch.as_tensor(batch["recognition"]["instr"],
                                            dtype=torch.long)
                    gold = torch.as_tensor(batch["recognition"]["gold_slot"],
                                           dtype=torch.long)
                    instr_emb = policy.embed_instruction_indices(instr)
                    seq = policy.build_sequence(tokens, None, "recognize",
                                                instr_emb=instr_emb)
                    logits = policy.encode(seq, "recognize")
                    recog_l = F.cross_entropy(logits, gold, reduction="none")
                loss = total_loss(track_l, recog_l, cfg.loss)
                if not torch.isfinite(loss):
                    raise TrainingDiverged(f"non-finite loss at step {step}")
                opt.zero_grad()
                loss.backward()
                if cfg.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
                opt.step()
                row = {
                    "step": step,
                    "l_track": float(track_l.detach().mean()) if track_l is not None else 0.0,
                    "l_text": float(recog_l.detach().mean()) if recog_l is not None else 0.0,
                    "l": float(loss.detach()),
                    "lr": lr,
                }
                curve.append(row)
                if writer is not None:
                    writer.writerow([row["step"], row["l_track"], row["l_text"],
                                     row["l"], row["lr"]])
                step += 1
    finally:
        if writer is not None:
            f.close()
    return curve
