"""Small trainable ViT encoder producing a 1/16-resolution bottleneck.

Patch tokens from a pre-norm transformer are reshaped to a grid and
bicubically resized to (H/16, W/16) so the decoder always receives a
16x-downsampled feature map regardless of patch size.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class ViTConfig:
    patch_size: int = 8
    depth: int = 4
    width: int = 128
    heads: int = 4
    mlp_ratio: float = 4.0
    dropout: float = 0.0
    pos_grid: int = 16

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")


class SelfAttention(nn.Module):
    """Multi-head self-attention with separate Q/K/V projections so that
    low-rank adapters can target Query and Value individually."""

    def __init__(self, width: int, heads: int, dropout: float = 0.0):
        super().__init__()
        self.heads = heads
        self.head_dim = width // heads
        self.q = nn.Linear(width, width)
        self.k = nn.Linear(width, width)
        self.v = nn.Linear(width, width)
        self.proj = nn.Linear(width, width)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        b, n, d = x.shape

        def split(t):
            return t.view(b, n, self.heads, self.head_dim).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        attn = torch.softmax(q @ k.transpose(-2, -1) / self.head_dim**0.5, dim=-1)
        attn = self.drop(attn)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.drop(self.proj(out))


class Block(nn.Module):
    def __init__(self, cfg: ViTConfig):
        super().__init__()
        hidden = int(cfg.width * cfg.mlp_ratio)
        self.norm1 = nn.LayerNorm(cfg.width)
        self.attn = SelfAttention(cfg.width, cfg.heads, cfg.dropout)
        self.norm2 = nn.LayerNorm(cfg.width)
        self.mlp = nn.Sequential(
            nn.Linear(cfg.width, hidden),
            nn.GELU(),
            nn.Dropout(cfg.dropout),
            nn.Linear(hidden, cfg.width),
            nn.Dropout(cfg.dropout),
        )

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class ViTEncoder(nn.Module):
    def __init__(self, cfg: ViTConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Conv2d(3, cfg.width, cfg.patch_size, stride=cfg.patch_size)
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.width, cfg.pos_grid, cfg.pos_grid))
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(cfg.width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) -> (B, width, H/16, W/16)."""
        b, _, h, w = x.shape
        p = self.cfg.patch_size
        if h % p or w % p or h % 16 or w % 16:
            raise ValueError(f"input {h}x{w} must be divisible by patch size {p} and by 16")
        tokens = self.patch_embed(x)  # (B, width, gh, gw)
        gh, gw = tokens.shape[-2:]
        pos = self.pos_embed
        if pos.shape[-2:] != (gh, gw):
            pos = F.interpolate(pos, size=(gh, gw), mode="bicubic", align_corners=False)
        tokens = tokens + pos
        seq = tokens.flatten(2).transpose(1, 2)  # (B, gh*gw, width)
        for block in self.blocks:
            seq = block(seq)
        seq = self.norm(seq)
        grid = seq.transpose(1, 2).reshape(b, self.cfg.width, gh, gw)
        target = (h // 16, w // 16)
        if grid.shape[-2:] != target:
            grid = F.interpolate(grid, size=target, mode="bicubic", align_corners=False)
        return grid
