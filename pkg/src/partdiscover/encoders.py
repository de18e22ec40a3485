"""Dense feature-map encoders.

Two modes: a small trainable residual conv stack ("scratch", total stride 4)
or a frozen pretrained backbone followed by trainable 3x3 reduction blocks
("frozen_backbone").  Backbones plug in through a registry keyed by
descriptor string; a seeded fixed-random backbone is registered as
"toy_frozen" so frozen-mode code paths run without external weights.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Union

import torch
import torch.nn as nn
from torch import Tensor

from .core import CheckpointError, ConfigError, FeatureMap, Image

__all__ = [
    "EncoderConfig",
    "FrozenBackboneEncoder",
    "ScratchEncoder",
    "build_encoder",
    "encode",
    "register_backbone",
    "registered_backbones",
]

CACHE_ENV_VAR = "PARTDISCOVER_CACHE"


@dataclass(frozen=True)
class EncoderConfig:
    mode: str = "scratch"
    out_channels: int = 256
    base_channels: int = 64
    reduction_blocks: int = 3
    backbone: Optional[str] = None

    def __post_init__(self):
        if self.mode not in ("scratch", "frozen_backbone"):
            raise ConfigError(f"encoder mode must be 'scratch' or 'frozen_backbone', got {self.mode!r}")
        if self.out_channels < 1 or self.base_channels < 1:
            raise ConfigError("channel counts must be positive")
        if self.mode == "frozen_backbone" and not self.backbone:
            raise ConfigError("frozen_backbone mode requires a backbone descriptor")


class ResidualStage(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False), nn.BatchNorm2d(c_out))
        else:
            self.shortcut = nn.Identity()
        self.act = nn.ReLU()

    def forward(self, x: Tensor) -> Tensor:
        y = self.act(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        return self.act(y + self.shortcut(x))


class ScratchEncoder(nn.Module):
    """Residual conv stack with total stride 4 and a 1x1 output projection."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        b = cfg.base_channels
        self.stages = nn.Sequential(
            ResidualStage(3, b, stride=2),
            ResidualStage(b, b, stride=2),
            ResidualStage(b, 2 * b, stride=1),
            ResidualStage(2 * b, 4 * b, stride=1),
        )
        self.proj = nn.Conv2d(4 * b, cfg.out_channels, 1)
        self.total_stride = 4
        self.out_channels = cfg.out_channels

    def forward(self, pixels: Tensor) -> Tensor:
        return self.proj(self.stages(pixels))


BackboneLoader = Callable[[], nn.Module]
_BACKBONES: Dict[str, BackboneLoader] = {}


def register_backbone(descriptor: str, loader: BackboneLoader) -> None:
    """Register a frozen-backbone factory under a unique descriptor.

    The loader must return an ``nn.Module`` mapping ``(B, 3, H, W)`` pixels
    to a ``(B, C_b, H/stride, W/stride)`` grid and exposing ``out_channels``
    and ``total_stride`` attributes.
    """
    if descriptor in _BACKBONES:
        raise ConfigError(f"backbone {descriptor!r} is already registered")
    _BACKBONES[descriptor] = loader


def registered_backbones():
    return sorted(_BACKBONES)


def _load_backbone(descriptor: str) -> nn.Module:
    try:
        loader = _BACKBONES[descriptor]
    except KeyError:
        raise ConfigError(f"unknown backbone {descriptor!r}; registered: {registered_backbones()}") from None
    module = loader()
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def resolve_weight_path(path: str) -> str:
    """Resolve a backbone weight path, honoring the cache directory env var."""
    if os.path.isabs(path) or os.path.exists(path):
        return path
    cache = os.environ.get(CACHE_ENV_VAR)
    if cache:
        candidate = os.path.join(cache, path)
        if os.path.exists(candidate):
            return candidate
    raise CheckpointError(f"backbone weight file not found: {path!r} (cache dir: {cache or 'unset'})")


class ToyFrozenBackbone(nn.Module):
    """Seeded fixed-random conv stack, stride 8."""

    out_channels = 96
    total_stride = 8

    def __init__(self):
        super().__init__()
        gen = torch.Generator().manual_seed(0xBACB0)
        layers = []
        c_in = 3
        for c_out in (32, 64, 96):
            conv = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (c_in * 9) ** -0.5)
                conv.bias.zero_()
            layers += [conv, nn.LeakyReLU(0.2)]
            c_in = c_out
        self.net = nn.Sequential(*layers)

    def forward(self, pixels: Tensor) -> Tensor:
        return self.net(pixels)


register_backbone("toy_frozen", ToyFrozenBackbone)


class FrozenBackboneEncoder(nn.Module):
    """Frozen backbone followed by trainable conv/ReLU/BN reduction blocks.

    The backbone is pinned in eval mode (``train()`` never touches it) and
    its parameters are excluded from gradient tracking.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.backbone = _load_backbone(cfg.backbone)
        blocks = []
        c_in = self.backbone.out_channels
        for _ in range(cfg.reduction_blocks):
            blocks += [
                nn.Conv2d(c_in, cfg.out_channels, 3, padding=1),
                nn.ReLU(),
                nn.BatchNorm2d(cfg.out_channels),
            ]
            c_in = cfg.out_channels
        self.reduction = nn.Sequential(*blocks)
        self.total_stride = self.backbone.total_stride
        self.out_channels = cfg.out_channels

    def train(self, mode: bool = True):
        super().train(mode)
        self.backbone.eval()
        return self

    def forward(self, pixels: Tensor) -> Tensor:
        with torch.no_grad():
            feats = self.backbone(pixels)
        return self.reduction(feats)


def build_encoder(cfg: EncoderConfig) -> nn.Module:
    if cfg.mode == "scratch":
        return ScratchEncoder(cfg)
    return FrozenBackboneEncoder(cfg)


def encode(image: Union[Image, Tensor], encoder: nn.Module) -> FeatureMap:
    """Single-image adapter: ``(H, W, 3)`` pixels to an ``(H/s, W/s, C)`` map.

    Runs in eval mode without gradients; the training loop calls the encoder
    module directly on batched channels-first tensors instead.
    """
    pixels = image.pixels if isinstance(image, Image) else image
    h, w = pixels.shape[-3], pixels.shape[-2]
    s = encoder.total_stride
    if h % s or w % s:
        raise ValueError(f"image size {(h, w)} is not divisible by encoder stride {s}")
    was_training = encoder.training
    encoder.eval()
    try:
        with torch.no_grad():
            batch = pixels.permute(2, 0, 1).unsqueeze(0).to(next(encoder.parameters()).dtype)
            feats = encoder(batch)
    finally:
        encoder.train(was_training)
    return FeatureMap(feats[0].permute(1, 2, 0))
