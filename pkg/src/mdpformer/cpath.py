"""Classification path: meta-token memory, dual-path transformer blocks, head.

A short learned memory sequence is extended with two embedded meta tokens
(gender, age).  Each block lets the memory cross-attend jointly to itself and
to the pixel tokens: keys and values from both paths are concatenated along
the length dimension before one softmax, so every memory query mixes global
memory state with image evidence in a single attention step.  Pixel tokens
are not updated by default; an optional flag enables a symmetric pixel-path
update.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn

from .config import ModelConfig
from .spath import FeatureBundle, GatedFusion, SPath


def scaled_cross_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor):
    """Single-head attention: softmax(q k^T / sqrt(C)) v.

    ``q`` is (B, L, C); ``k`` and ``v`` are (B, M, C) where M may exceed L
    (concatenated memory + pixel entries).  Returns the attended values and
    the attention weights (each row non-negative, summing to 1).
    """
    if q.shape[-1] != k.shape[-1] or k.shape[:-1] != v.shape[:-1]:
        raise ValueError(f"incompatible attention shapes q={tuple(q.shape)} "
                         f"k={tuple(k.shape)} v={tuple(v.shape)}")
    logits = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    weights = torch.softmax(logits, dim=-1)
    return weights @ v, weights


class MetaMemory(nn.Module):
    """Learned memory tokens, optionally extended with embedded meta tokens."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.meta_off = cfg.meta_off
        self.tokens = nn.Parameter(torch.empty(cfg.num_memory, cfg.token_dim))
        nn.init.normal_(self.tokens, std=0.02)
        self.gender_embed = nn.Linear(1, cfg.token_dim)
        self.age_embed = nn.Linear(1, cfg.token_dim)

    @property
    def length(self) -> int:
        return self.tokens.shape[0] + (0 if self.meta_off else 2)

    def forward(self, meta: torch.Tensor | None, batch: int) -> torch.Tensor:
        """Build the initial memory sequence (B, L, C); meta rows come last."""
        mem = self.tokens.unsqueeze(0).expand(batch, -1, -1)
        if self.meta_off:
            return mem
        if meta is None:
            raise ValueError("meta tensor required unless the model is built with meta_off")
        if meta.shape != (batch, 2):
            raise ValueError(f"meta must be (batch, 2), got {tuple(meta.shape)}")
        meta = meta.to(mem.dtype)
        g = self.gender_embed(meta[:, 0:1]).unsqueeze(1)
        a = self.age_embed(meta[:, 1:2]).unsqueeze(1)
        return torch.cat([mem, g, a], dim=1)


class FeedForward(nn.Module):
    def __init__(self, dim: int, expansion: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.net = nn.Sequential(nn.Linear(dim, expansion * dim), nn.ReLU(inplace=True),
                                 nn.Linear(expansion * dim, dim))

    def forward(self, x):
        return x + self.net(self.norm(x))


class DualPathBlock(nn.Module):
    """One memory-update block with cross-attention over concatenated keys/values."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        dim = cfg.token_dim
        self.norm_mem = nn.LayerNorm(dim)
        self.norm_pix = nn.LayerNorm(dim)
        self.q_c = nn.Linear(dim, dim)
        self.k_c = nn.Linear(dim, dim)
        self.v_c = nn.Linear(dim, dim)
        self.k_s = nn.Linear(dim, dim)
        self.v_s = nn.Linear(dim, dim)
        self.ffn = FeedForward(dim, cfg.ffn_expansion)
        self.pixel_update = cfg.pixel_path_update
        if self.pixel_update:
            self.q_s = nn.Linear(dim, dim)
            self.pix_ffn = FeedForward(dim, cfg.ffn_expansion)

    def forward(self, mem: torch.Tensor, pix: torch.Tensor):
        """Update memory (B, L, C) from pixel tokens (B, N, C); N >= 1 required."""
        if pix.shape[1] < 1:
            raise ValueError("at least one pixel token is required")
        if mem.shape[-1] != pix.shape[-1]:
            raise ValueError(f"token dims differ: memory {mem.shape[-1]} "
                             f"vs pixels {pix.shape[-1]}")
        m = self.norm_mem(mem)
        p = self.norm_pix(pix)
        keys = torch.cat([self.k_c(m), self.k_s(p)], dim=1)
        values = torch.cat([self.v_c(m), self.v_s(p)], dim=1)
        attended, _ = scaled_cross_attention(self.q_c(m), keys, values)
        mem = self.ffn(mem + attended)
        if self.pixel_update:
            pix_attended, _ = scaled_cross_attention(self.q_s(p), keys, values)
            pix = self.pix_ffn(pix + pix_attended)
        return mem, pix


class ClassifierHead(nn.Module):
    """Mean-pool the memory tokens, then two fully connected layers + softmax."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.fc1 = nn.Linear(cfg.token_dim, cfg.token_dim)
        self.fc2 = nn.Linear(cfg.token_dim, cfg.num_classes)

    def forward(self, mem: torch.Tensor) -> torch.Tensor:
        pooled = mem.mean(dim=1)
        logits = self.fc2(torch.relu(self.fc1(pooled)))
        return torch.softmax(logits, dim=-1)


class CPath(nn.Module):
    """Memory initialization, stacked dual-path blocks, classification head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.memory = MetaMemory(cfg)
        self.blocks = nn.ModuleList(DualPathBlock(cfg) for _ in range(cfg.num_blocks))
        self.head = ClassifierHead(cfg)

    def forward(self, pix_tokens: torch.Tensor, meta: torch.Tensor | None) -> torch.Tensor:
        mem = self.memory(meta, pix_tokens.shape[0])
        for block in self.blocks:
            mem, pix_tokens = block(mem, pix_tokens)
        return self.head(mem)


def flatten_tokens(grid: torch.Tensor) -> torch.Tensor:
    """(B, C, y, x, z) feature grid -> (B, y*x*z, C) token sequence."""
    return grid.flatten(2).transpose(1, 2)


class MDPFormer(nn.Module):
    """Full dual-path model: segmentation logits plus 10-class probabilities.

    With ``meta_off`` the meta tokens are omitted entirely and the output is
    independent of the meta input (the image-only ablation).
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.spath = SPath(cfg)
        self.fusion = GatedFusion(cfg)
        self.cpath = CPath(cfg)

    def forward(self, x: torch.Tensor, meta: torch.Tensor | None = None):
        """Return (class probabilities (B, 10), seg logits (B, 3, Y, X, Z))."""
        bundle = self.spath(x)
        tokens = flatten_tokens(self.fusion(bundle))
        probs = self.cpath(tokens, None if self.cfg.meta_off else meta)
        return probs, bundle.seg_logits

    def forward_bundle(self, x: torch.Tensor, meta: torch.Tensor | None = None):
        bundle = self.spath(x)
        tokens = flatten_tokens(self.fusion(bundle))
        probs = self.cpath(tokens, None if self.cfg.meta_off else meta)
        return probs, bundle
