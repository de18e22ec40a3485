"""Paired-view generation by random similarity warps.

Each training image is scaled, rotated and translated twice with
independently sampled parameters to form a view pair.  Warps resample
bilinearly with reflection padding so borders never introduce flat black
regions.  The exact parameters are returned alongside the views so
equivariance checks can invert them.

Pixel coordinates are ``(x, y) = (column, row)``; the forward map of a view
is ``p_out = R(angle) @ (scale * (p_in - c)) + c + t`` about the image
center ``c``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import Tensor

from .core import ConfigError, Image

__all__ = ["AffineParams", "AugmentSpec", "make_pair", "sample_params", "warp_images", "warp_labels"]


@dataclass(frozen=True)
class AugmentSpec:
    """Symmetric jitter ranges; all sampling is uniform."""

    scale_pct: float = 5.0
    rotate_deg: float = 15.0
    translate_px: float = 5.0

    def __post_init__(self):
        if min(self.scale_pct, self.rotate_deg, self.translate_px) < 0:
            raise ConfigError("augmentation ranges must be >= 0")
        if self.scale_pct >= 100:
            raise ConfigError("scale_pct must stay below 100")


@dataclass(frozen=True)
class AffineParams:
    scale: float = 1.0
    angle_deg: float = 0.0
    tx: float = 0.0
    ty: float = 0.0

    def inverse(self) -> "AffineParams":
        """Exact inverse for pure rotations/scales (zero translation)."""
        if self.tx or self.ty:
            raise ValueError("inverse() supports zero-translation params only")
        return AffineParams(scale=1.0 / self.scale, angle_deg=-self.angle_deg)


def sample_params(spec: AugmentSpec, rng: torch.Generator) -> AffineParams:
    u = torch.rand(4, generator=rng, dtype=torch.float64)
    lo_hi = lambda u_, r: float((u_ * 2 - 1) * r)
    return AffineParams(
        scale=1.0 + lo_hi(u[0], spec.scale_pct / 100.0),
        angle_deg=lo_hi(u[1], spec.rotate_deg),
        tx=lo_hi(u[2], spec.translate_px),
        ty=lo_hi(u[3], spec.translate_px),
    )


def _source_coords(h: int, w: int, params: Sequence[AffineParams], dtype, device):
    """Input-space sampling coordinates (x, y) for every output pixel."""
    b = len(params)
    scale = torch.tensor([p.scale for p in params], dtype=dtype, device=device).view(b, 1, 1)
    theta = torch.tensor([math.radians(p.angle_deg) for p in params], dtype=dtype, device=device).view(b, 1, 1)
    tx = torch.tensor([p.tx for p in params], dtype=dtype, device=device).view(b, 1, 1)
    ty = torch.tensor([p.ty for p in params], dtype=dtype, device=device).view(b, 1, 1)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=dtype, device=device),
        torch.arange(w, dtype=dtype, device=device),
        indexing="ij",
    )
    dx = xs.unsqueeze(0) - cx - tx
    dy = ys.unsqueeze(0) - cy - ty
    cos, sin = torch.cos(theta), torch.sin(theta)
    sx = (dx * cos + dy * sin) / scale + cx
    sy = (-dx * sin + dy * cos) / scale + cy
    return sx, sy


def warp_images(pixels: Tensor, params: Sequence[AffineParams]) -> Tensor:
    """Warp a ``(B, 3, H, W)`` batch, one parameter set per item."""
    b, _, h, w = pixels.shape
    if len(params) != b:
        raise ValueError(f"got {len(params)} parameter sets for batch of {b}")
    sx, sy = _source_coords(h, w, params, pixels.dtype, pixels.device)
    gx = 2.0 * sx / max(w - 1, 1) - 1.0
    gy = 2.0 * sy / max(h - 1, 1) - 1.0
    grid = torch.stack((gx, gy), dim=-1)
    return F.grid_sample(pixels, grid, mode="bilinear", padding_mode="reflection", align_corners=True)


def warp_labels(labels: Tensor, params: AffineParams) -> Tuple[Tensor, Tensor]:
    """Nearest-neighbor warp of an ``(H, W)`` integer label grid.

    Returns the warped labels (0 where the source falls outside the frame)
    and the in-frame validity mask.
    """
    h, w = labels.shape
    sx, sy = _source_coords(h, w, [params], torch.float64, labels.device)
    ix = sx[0].round().long()
    iy = sy[0].round().long()
    valid = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
    ix = ix.clamp(0, w - 1)
    iy = iy.clamp(0, h - 1)
    out = labels[iy, ix]
    return torch.where(valid, out, torch.zeros_like(out)), valid


def make_pair(
    image: Image, spec: AugmentSpec, rng: torch.Generator
) -> Tuple[Image, Image, AffineParams, AffineParams]:
    """Two independently jittered views of one image plus their parameters."""
    p1 = sample_params(spec, rng)
    p2 = sample_params(spec, rng)
    batch = image.pixels.permute(2, 0, 1).unsqueeze(0)
    v1 = warp_images(batch, [p1])[0].permute(1, 2, 0)
    v2 = warp_images(batch, [p2])[0].permute(1, 2, 0)
    return Image(v1.clamp(0.0, 1.0)), Image(v2.clamp(0.0, 1.0)), p1, p2
