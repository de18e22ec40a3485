"""CNN decoder: synthetic feature map back to pixels.

Two nearest-neighbor x2 upsamplings interleaved among five 3x3 conv blocks
(conv -> ReLU -> channel layer norm), a final 3x3 conv to RGB and a sigmoid
squash to [0, 1].  Output is always 4x the input grid.  Normalization uses
per-sample statistics only, so one sample's output never depends on the rest
of the batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .core import ConfigError, Image, SyntheticFeatureMap, require_finite

__all__ = ["ChannelLayerNorm", "Decoder", "DecoderConfig", "reconstruct"]


@dataclass(frozen=True)
class DecoderConfig:
    in_channels: int = 256
    widths: Tuple[int, int, int, int, int] = (256, 128, 128, 64, 64)

    def __post_init__(self):
        if len(self.widths) != 5:
            raise ConfigError(f"decoder needs exactly 5 conv-block widths, got {len(self.widths)}")
        if self.in_channels < 1 or min(self.widths) < 1:
            raise ConfigError("decoder channel counts must be positive")


class ChannelLayerNorm(nn.Module):
    """Layer norm over the channel dim of a (B, C, H, W) tensor."""

    def __init__(self, channels: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        y = F.layer_norm(x.permute(0, 2, 3, 1), (x.shape[1],), self.weight, self.bias)
        return y.permute(0, 3, 1, 2)


def _block(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(c_in, c_out, 3, padding=1), nn.ReLU(), ChannelLayerNorm(c_out))


class Decoder(nn.Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        w = cfg.widths
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        self.block1 = _block(cfg.in_channels, w[0])
        self.block2 = _block(w[0], w[1])
        self.block3 = _block(w[1], w[2])
        self.block4 = _block(w[2], w[3])
        self.block5 = _block(w[3], w[4])
        self.final = nn.Conv2d(w[4], 3, 3, padding=1)

    def forward(self, s: Tensor) -> Tensor:
        """(B, C, H, W) features to (B, 3, 4H, 4W) pixels in (0, 1)."""
        x = self.block2(self.block1(self.up(s)))
        x = self.block5(self.block4(self.block3(self.up(x))))
        return torch.sigmoid(self.final(x))


def reconstruct(s: Union[SyntheticFeatureMap, Tensor], decoder: Decoder) -> Image:
    """Single-map adapter: ``(H, W, C)`` features to a ``(4H, 4W, 3)`` image."""
    vals = s.values if isinstance(s, SyntheticFeatureMap) else s
    require_finite(vals, "synthetic feature map")
    was_training = decoder.training
    decoder.eval()
    try:
        with torch.no_grad():
            batch = vals.permute(2, 0, 1).unsqueeze(0).to(next(decoder.parameters()).dtype)
            out = decoder(batch)
    finally:
        decoder.train(was_training)
    return Image(out[0].permute(1, 2, 0))
