"""Compact stand-in for the VLM backbone.

A 2-layer MLP projects pooled visual tokens into the model dimension; a
small causal transformer consumes [visual tokens, instruction token,
tracking token] and yields either a condition vector (tracking, taken at
the tracking-token position in a single forward pass) or answer-slot
logits (recognition, taken at the final position).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .sensing import C_FEAT, WINDOW_K, FINE_TOKENS, COARSE_TOKENS

MODES = ("by_attributes", "first_seen", "any_person")


@dataclass(frozen=True)
class EncoderConfig:
    depth: int = 4
    dim: int = 128
    heads: int = 4
    c_feat: int = C_FEAT
    n_slots: int = 4
    window_k: int = WINDOW_K
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError("dim must be divisible by heads")

    @property
    def max_len(self) -> int:
        # longest sequence: coarse history + fine latest + instruction + track token
        return COARSE_TOKENS * (self.window_k - 1) + FINE_TOKENS + 2

    def to_json(self):
        return {"depth": self.depth, "dim": self.dim, "heads": self.heads,
                "c_feat": self.c_feat, "n_slots": self.n_slots,
                "window_k": self.window_k, "mlp_ratio": self.mlp_ratio}

    @staticmethod
    def from_json(d):
        return EncoderConfig(**d)


class SequenceContractError(Exception):
    pass


@dataclass
class TokenSequence:
    """Embedded input sequence plus bookkeeping for the two decode modes."""
    embeddings: torch.Tensor          # (B, L, D)
    track_pos: int | None             # index of the tracking token, or None
    lengths: torch.Tensor | None = None  # (B,) real lengths when right-padded

    @property
    def has_track(self) -> bool:
        return self.track_pos is not None


class Block(nn.Module):
    def __init__(self, dim, heads, mlp_ratio):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))

    def forward(self, x, attn_mask):
        b, l, d = x.shape
        h = self.heads
        q, k, v = self.qkv(self.ln1(x)).chunk(3, dim=-1)
        q = q.view(b, l, h, d // h).transpose(1, 2)
        k = k.view(b, l, h, d // h).transpose(1, 2)
        v = v.view(b, l, h, d // h).transpose(1, 2)
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=attn_mask)
        out = out.transpose(1, 2).reshape(b, l, d)
        x = x + self.proj(out)
        x = x + self.mlp(self.ln2(x))
        return x


class TrackPolicy(nn.Module):
    """Projector + instruction embedding + causal transformer encoder."""

    def __init__(self, cfg: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.cfg = cfg
        d = cfg.dim
        self.projector = nn.Sequential(
            nn.Linear(cfg.c_feat, d), nn.GELU(), nn.Linear(d, d))
        self.mode_emb = nn.Embedding(len(MODES), d)
        self.color_emb = nn.Embedding(9, d)      # 0 = unspecified
        self.build_emb = nn.Embedding(5, d)
        self.headwear_emb = nn.Embedding(5, d)
        self.track_token = nn.Parameter(torch.zeros(d))
        self.pos_emb = nn.Parameter(torch.zeros(cfg.max_len, d))
        nn.init.normal_(self.pos_emb, std=0.02)
        nn.init.normal_(self.track_token, std=0.02)
        self.blocks = nn.ModuleList(
            [Block(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)])
        self.ln_f = nn.LayerNorm(d)
        self.slot_head = nn.Linear(d, cfg.n_slots)
        self.forward_count = 0  # instrumentation: transformer passes performed

    def project(self, tokens: torch.Tensor) -> torch.Tensor:
        """Map (..., C_feat) pooled tokens into the model dimension."""
        return self.projector(tokens)

    def embed_instruction(self, instruction) -> torch.Tensor:
        """Sum of mode and per-attribute embeddings, one token per sample."""
        idx = instruction_indices(instruction)
        dev = self.track_token.device
        return self.embed_instruction_indices(
            torch.tensor([idx], device=dev)).squeeze(0)

    def embed_instruction_indices(self, idx: torch.Tensor) -> torch.Tensor:
        """idx: (B, 4) integer columns [mode, color, build, headwear]."""
        return (self.mode_emb(idx[:, 0]) + self.color_emb(idx[:, 1])
                + self.build_emb(idx[:, 2]) + self.headwear_emb(idx[:, 3]))

    def build_sequence(self, visual_tokens: torch.Tensor, instruction,
                       mode: str, instr_emb: torch.Tensor | None = None) -> TokenSequence:
        """visual_tokens: (B, L, C_feat); instruction shared unless instr_emb
        (B, D) carries per-sample instruction embeddings."""
        if visual_tokens.dim() == 2:
            visual_tokens = visual_tokens.unsqueeze(0)
        b, l, _ = visual_tokens.shape
        if instr_emb is None:
            instr_emb = self.embed_instruction(instruction).expand(b, -1)
        parts = [self.project(visual_tokens), instr_emb.unsqueeze(1)]
        track_pos = None
        if mode == "track":
            track_pos = l + 1
            parts.append(self.track_token.expand(b, 1, -1))
        seq = torch.cat(parts, dim=1)
        seq = seq + self.pos_emb[: seq.shape[1]]
        return TokenSequence(embeddings=seq, track_pos=track_pos)

    def _run(self, seq: TokenSequence) -> torch.Tensor:
        x = seq.embeddings
        b, l, _ = x.shape
        causal = torch.tril(torch.ones(l, l, dtype=torch.bool, device=x.device))
        mask = causal
        if seq.lengths is not None:
            keep = (torch.arange(l, device=x.device)[None, :]
                    < seq.lengths[:, None])       # (B, L) valid keys
            mask = causal[None, None] & keep[:, None, None, :]
        self.forward_count += 1
        for blk in self.blocks:
            x = blk(x, mask)
        return self.ln_f(x)

    def encode(self, seq: TokenSequence, mode: str):
        """track -> condition vector (B, D); recognize -> slot logits (B, n_slots)."""
        if mode == "track":
            if not seq.has_track:
                raise SequenceContractError("track mode requires a tracking token")
            h = self._run(seq)
            return h[:, seq.track_pos]
        if mode == "recognize":
            h = self._run(seq)
            if seq.lengths is not None:
                idx = (seq.lengths - 1).view(-1, 1, 1).expand(-1, 1, h.shape[-1])
                final = h.gather(1, idx).squeeze(1)
            else:
                final = h[:, -1]
            return self.slot_head(final)
        raise ValueError(f"unknown mode {mode}")

    def condition(self, visual_tokens, instruction) -> torch.Tensor:
        """Single-forward tracking condition for the action model."""
        seq = self.build_sequence(visual_tokens, instruction, "track")
        return self.encode(seq, "track")

    def recognize(self, visual_tokens, instruction) -> torch.Tensor:
        seq = self.build_sequence(visual_tokens, instruction, "recognize")
        return self.encode(seq, "recognize")


def instruction_indices(instruction):
    """[mode, color, build, headwear] embedding-table indices; 0 = unspecified."""
    a = instruction.attributes
    return (MODES.index(instruction.mode),
            1 + a.garment_color if a is not None else 0,
            1 + a.build if a is not None else 0,
            1 + a.headwear if a is not None else 0)


def pad_track_tokens(tokens, cfg: EncoderConfig):
    """Front-pad an assembled tracking sequence with zeros to the fixed
    length used by the encoder (short windows early in an episode)."""
    full = COARSE_TOKENS * (cfg.window_k - 1) + FINE_TOKENS
    if tokens.shape[0] > full:
        raise ValueError(f"sequence longer than window allows: {tokens.shape[0]}")
    if tokens.shape[0] == full:
        return tokens
    pad = np.zeros((full - tokens.shape[0], tokens.shape[1]), dtype=tokens.dtype)
    return np.concatenate([pad, tokens], axis=0)


def recognition_loss(logits: torch.Tensor, gold_slot) -> torch.Tensor:
    """Cross-entropy over answer slots."""
    gold = torch.as_tensor(gold_slot, device=logits.device)
    if gold.dim() == 0:
        gold = gold.unsqueeze(0)
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
    if gold.max().item() >= logits.shape[-1]:
        raise ValueError(f"gold slot {gold.max().item()} out of range")
    return F.cross_entropy(logits, gold)
