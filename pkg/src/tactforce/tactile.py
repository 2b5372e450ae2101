"""Tactile window encoder: per-frame patch attention, then a causal temporal transformer.

The learnable summary token sits in the last slot, so under the causal mask it
attends to every frame while frame slot j only sees slots <= j.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .data import IMAGE_SIZE


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"embed dim {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, allowed: torch.Tensor | None = None) -> torch.Tensor:
        b, t, d = x.shape
        q, k, v = self.qkv(x).view(b, t, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(d // self.heads)
        if allowed is not None:
            att = att.masked_fill(~allowed, float("-inf"))
        out = att.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, t, d))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 2):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))

    def forward(self, x, allowed=None):
        x = x + self.attn(self.norm1(x), allowed)
        return x + self.mlp(self.norm2(x))


class FrameEncoder(nn.Module):
    """Patch embedding + attention blocks, mean-pooled to one feature per frame."""

    def __init__(self, image_size: int = IMAGE_SIZE, patch_size: int = 8, embed_dim: int = 64,
                 depth: int = 2, heads: int = 4):
        super().__init__()
        if image_size % patch_size:
            raise ValueError("patch size must tile the image exactly")
        self.image_size, self.patch_size = image_size, patch_size
        n_patches = (image_size // patch_size) ** 2
        self.embed = nn.Linear(patch_size * patch_size, embed_dim)
        self.pos = nn.Parameter(0.02 * torch.randn(n_patches, embed_dim))
        self.blocks = nn.ModuleList([Block(embed_dim, heads) for _ in range(depth)])
        self.norm = nn.LayerNorm(embed_dim)

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        b, p = images.shape[0], self.patch_size
        g = self.image_size // p
        x = images.reshape(b, g, p, g, p).permute(0, 1, 3, 2, 4)
        return x.reshape(b, g * g, p * p)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.shape[-2:] != (self.image_size, self.image_size):
            raise ValueError(f"expected {self.image_size}x{self.image_size} images, got {tuple(images.shape[-2:])}")
        x = self.embed(self.patchify(images)) + self.pos
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x).mean(dim=1)


class TemporalEncoder(nn.Module):
    def __init__(self, window: int = 5, embed_dim: int = 64, depth: int = 2, heads: int = 4,
                 out_dim: int | None = None):
        super().__init__()
        self.window = window
        self.summary = nn.Parameter(0.02 * torch.randn(embed_dim))
        self.pos = nn.Parameter(0.02 * torch.randn(window + 1, embed_dim))
        self.blocks = nn.ModuleList([Block(embed_dim, heads) for _ in range(depth)])
        self.norm = nn.LayerNorm(embed_dim)
        self.head = nn.Linear(embed_dim, out_dim) if out_dim else nn.Identity()
        self.register_buffer("allowed", torch.tril(torch.ones(window + 1, window + 1, dtype=torch.bool)))

    def slots(self, h: torch.Tensor) -> torch.Tensor:
        """Outputs of all N+1 slots (frames first, summary last) before the head."""
        if h.shape[1] != self.window:
            raise ValueError(f"expected {self.window} frame features, got {h.shape[1]}")
        s = self.summary.expand(h.shape[0], 1, -1)
        x = torch.cat([h, s], dim=1) + self.pos
        for blk in self.blocks:
            x = blk(x, self.allowed)
        return self.norm(x)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.head(self.slots(h)[:, -1])


class TactileEncoder(nn.Module):
    """Image window (B, N, H, W) -> window embedding (B, out_dim)."""

    def __init__(self, window: int = 5, image_size: int = IMAGE_SIZE, patch_size: int = 8,
                 embed_dim: int = 64, depth: int = 2, heads: int = 4, temporal_depth: int = 2,
                 temporal_heads: int = 4, out_dim: int | None = None):
        super().__init__()
        self.window = window
        self.frame = FrameEncoder(image_size, patch_size, embed_dim, depth, heads)
        self.temporal = TemporalEncoder(window, embed_dim, temporal_depth, temporal_heads, out_dim)

    def encode_frames(self, images: torch.Tensor) -> torch.Tensor:
        b, n = images.shape[:2]
        return self.frame(images.reshape(b * n, *images.shape[2:])).view(b, n, -1)

    def slots(self, images: torch.Tensor) -> torch.Tensor:
        return self.temporal.slots(self.encode_frames(images))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim != 4 or images.shape[1] != self.window:
            raise ValueError(f"expected (B, {self.window}, H, W) image windows, got {tuple(images.shape)}")
        return self.temporal(self.encode_frames(images))
