"""Transformer that aggregates image patches into per-part vectors.

Instead of a single class token, K+1 learnable part embeddings (K foreground
plus one background) are prepended to the patch sequence.  Part tokens carry
no positional term, so a part can be represented wherever it appears; patch
tokens get learnable positions.  The part-token outputs pass through a small
projection MLP down to the feature-map channel count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import torch
import torch.nn as nn
from torch import Tensor

from .core import ConfigError, Image, PartRepresentations

__all__ = [
    "AttentionRecord",
    "PartEmbeddings",
    "PartFormer",
    "PartFormerConfig",
    "attention_map",
    "extract_parts",
]


@dataclass(frozen=True)
class PartFormerConfig:
    k_parts: int
    out_channels: int
    image_size: Tuple[int, int]
    layers: int = 6
    heads: int = 8
    hidden: int = 256
    mlp_dim: int = 1024
    patch: int = 16
    # When False the module owns no part embeddings and expects them per call
    # (multi-class mode, where a shared bank supplies the rows).
    own_embeddings: bool = True

    def __post_init__(self):
        if self.k_parts < 1:
            raise ConfigError("k_parts must be >= 1")
        if self.hidden % self.heads != 0:
            raise ConfigError(f"hidden ({self.hidden}) must be divisible by heads ({self.heads})")
        h, w = self.image_size
        if h % self.patch or w % self.patch:
            raise ConfigError(f"image size {self.image_size} must be divisible by patch {self.patch}")

    @property
    def patch_grid(self) -> Tuple[int, int]:
        return (self.image_size[0] // self.patch, self.image_size[1] // self.patch)

    @property
    def n_patches(self) -> int:
        gh, gw = self.patch_grid
        return gh * gw


@dataclass(frozen=True)
class PartEmbeddings:
    """Learnable query rows, shape ``(K+1, d)``; the last row is background."""

    values: Tensor

    def __post_init__(self):
        if self.values.dim() != 2 or self.values.shape[0] < 2:
            raise ValueError(f"part embeddings must have shape (K+1, d) with K >= 1, got {tuple(self.values.shape)}")


@dataclass(frozen=True)
class AttentionRecord:
    """Part-token attention over the patch grid for one image.

    ``weights`` has shape ``(layers, heads, K+1, N_patches)``; each row is the
    part token's attention restricted to patch keys and renormalized to sum
    to 1.  ``patch_grid`` is the (rows, cols) layout of the N patches.
    """

    weights: Tensor
    patch_grid: Tuple[int, int]

    def __post_init__(self):
        w = self.weights
        if w.dim() != 4:
            raise ValueError(f"attention weights must have shape (L, heads, K+1, N), got {tuple(w.shape)}")
        gh, gw = self.patch_grid
        if gh * gw != w.shape[-1]:
            raise ValueError(f"patch grid {self.patch_grid} does not cover {w.shape[-1]} patches")
        if w.detach().min() < 0:
            raise ValueError("attention weights must be non-negative")
        err = (w.detach().sum(dim=-1) - 1.0).abs().max().item()
        if err > 1e-5:
            raise ValueError(f"attention rows must sum to 1 (max deviation {err:.3e})")


def trunc_normal_(t: Tensor, std: float = 0.02) -> Tensor:
    return nn.init.trunc_normal_(t, std=std, a=-2 * std, b=2 * std)


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out), attn


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_dim), nn.GELU(), nn.Linear(mlp_dim, dim))

    def forward(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        y, attn = self.attn(self.norm1(x))
        x = x + y
        x = x + self.mlp(self.norm2(x))
        return x, attn


class PartFormer(nn.Module):
    def __init__(self, cfg: PartFormerConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.hidden
        self.patch_embed = nn.Conv2d(3, d, kernel_size=cfg.patch, stride=cfg.patch)
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.n_patches, d))
        if cfg.own_embeddings:
            self.part_embeddings = nn.Parameter(torch.zeros(cfg.k_parts + 1, d))
        else:
            self.part_embeddings = None
        self.blocks = nn.ModuleList(Block(d, cfg.heads, cfg.mlp_dim) for _ in range(cfg.layers))
        self.norm = nn.LayerNorm(d)
        self.head = nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, cfg.out_channels))
        self._init_weights()

    def _init_weights(self):
        trunc_normal_(self.pos_embed)
        if self.part_embeddings is not None:
            trunc_normal_(self.part_embeddings)
        trunc_normal_(self.patch_embed.weight)
        nn.init.zeros_(self.patch_embed.bias)
        for mod in self.modules():
            if isinstance(mod, nn.Linear):
                trunc_normal_(mod.weight)
                nn.init.zeros_(mod.bias)

    def forward(
        self,
        pixels: Tensor,
        part_embeddings: Optional[Union[PartEmbeddings, Tensor]] = None,
    ) -> Tuple[Tensor, Tensor]:
        """Run on ``(B, 3, H, W)`` pixels.

        Returns ``(parts, attention)`` where ``parts`` is ``(B, K+1, C)`` and
        ``attention`` is ``(L, B, heads, K+1, N)`` with rows renormalized over
        patch keys.
        """
        cfg = self.cfg
        b, _, h, w = pixels.shape
        if (h, w) != tuple(cfg.image_size):
            raise ValueError(f"expected input size {cfg.image_size}, got {(h, w)}")
        if part_embeddings is None:
            if self.part_embeddings is None:
                raise ConfigError("this module owns no part embeddings; pass them explicitly")
            pe = self.part_embeddings
        else:
            pe = part_embeddings.values if isinstance(part_embeddings, PartEmbeddings) else part_embeddings
        n_tokens = pe.shape[0]
        patches = self.patch_embed(pixels).flatten(2).transpose(1, 2) + self.pos_embed
        x = torch.cat([pe.unsqueeze(0).expand(b, -1, -1), patches], dim=1)
        records = []
        for block in self.blocks:
            x, attn = block(x)
            rows = attn[:, :, :n_tokens, n_tokens:]
            rows = rows / rows.sum(dim=-1, keepdim=True).clamp_min(1e-30)
            records.append(rows)
        parts = self.head(self.norm(x[:, :n_tokens]))
        return parts, torch.stack(records)


def extract_parts(image: Image, model: PartFormer, part_embeddings=None):
    """Deterministic single-image inference.

    Returns the (K+1, C) part representations and the attention record.
    """
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            pixels = image.pixels.permute(2, 0, 1).unsqueeze(0).to(next(model.parameters()).dtype)
            parts, attn = model(pixels, part_embeddings)
    finally:
        model.train(was_training)
    grid_h = image.size[0] // model.cfg.patch
    grid_w = image.size[1] // model.cfg.patch
    return (
        PartRepresentations(parts[0]),
        AttentionRecord(attn[:, 0], (grid_h, grid_w)),
    )


def attention_map(record: AttentionRecord, part_k: int) -> Tensor:
    """Mean over layers and heads of one part's attention, on the patch grid."""
    n_parts = record.weights.shape[-2]
    if not 0 <= part_k < n_parts:
        raise ValueError(f"part index {part_k} out of range [0, {n_parts - 1}]")
    flat = record.weights[:, :, part_k, :].mean(dim=(0, 1))
    return flat.reshape(record.patch_grid)
