"""Shared tensor value types, exceptions and geometry helpers.

Every array in this package is a :class:`torch.Tensor`.  The wrapper classes
below are immutable value objects: construction validates shapes and numeric
invariants once, after which instances can be shared freely (including across
threads).  Map-like types permit leading batch dimensions; ``PartMask``
always describes a single image.

Coordinate convention throughout: ``(i, j)`` is ``(row, column)``, zero-based.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import torch
import torch.nn.functional as F
from torch import Tensor

__all__ = [
    "CheckpointError",
    "ConfigError",
    "EmptyForegroundError",
    "FeatureMap",
    "Image",
    "NumericError",
    "PartMask",
    "PartRepresentations",
    "ProbabilityMap",
    "SyntheticFeatureMap",
    "bilinear_resize",
    "coordinate_grid",
    "require_finite",
]

# Per-pixel channel sums of a probability map may deviate from 1 by float
# rounding; this is the accepted slack (float32 softmax over <=64 channels
# stays well inside it).
PROBABILITY_ATOL = 1e-6


class ConfigError(ValueError):
    """Invalid, unknown or inconsistent configuration."""


class NumericError(RuntimeError):
    """A computation received or produced non-finite values."""


class CheckpointError(IOError):
    """Unreadable, truncated or version-incompatible checkpoint archive."""


class EmptyForegroundError(ValueError):
    """A foreground-restricted metric was asked to run without foreground."""


def require_finite(t: Tensor, what: str) -> None:
    if not torch.isfinite(t).all():
        raise NumericError(f"{what} contains non-finite values")


@dataclass(frozen=True)
class Image:
    """Pixel array in [0, 1] with shape ``(..., H, W, 3)``."""

    pixels: Tensor

    def __post_init__(self):
        p = self.pixels
        if p.dim() < 3 or p.shape[-1] != 3:
            raise ValueError(f"image pixels must have shape (..., H, W, 3), got {tuple(p.shape)}")
        require_finite(p, "image pixels")
        lo, hi = p.min().item(), p.max().item()
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"image pixel values must lie in [0, 1], got range [{lo}, {hi}]")

    @property
    def size(self) -> Tuple[int, int]:
        return (int(self.pixels.shape[-3]), int(self.pixels.shape[-2]))


@dataclass(frozen=True)
class FeatureMap:
    """Dense per-pixel representation grid, shape ``(..., H, W, C)``."""

    values: Tensor

    def __post_init__(self):
        if self.values.dim() < 3:
            raise ValueError(f"feature map must have shape (..., H, W, C), got {tuple(self.values.shape)}")
        require_finite(self.values, "feature map")

    @property
    def grid(self) -> Tuple[int, int]:
        return (int(self.values.shape[-3]), int(self.values.shape[-2]))

    @property
    def channels(self) -> int:
        return int(self.values.shape[-1])


@dataclass(frozen=True)
class PartRepresentations:
    """Per-part vectors, shape ``(..., K+1, C)``; the last row is background."""

    values: Tensor

    def __post_init__(self):
        if self.values.dim() < 2 or self.values.shape[-2] < 2:
            raise ValueError(
                f"part representations must have shape (..., K+1, C) with K >= 1, got {tuple(self.values.shape)}"
            )
        require_finite(self.values, "part representations")

    @property
    def k_foreground(self) -> int:
        return int(self.values.shape[-2]) - 1

    def foreground(self) -> Tensor:
        return self.values[..., :-1, :]

    def background(self) -> Tensor:
        return self.values[..., -1, :]


@dataclass(frozen=True)
class ProbabilityMap:
    """Soft part assignment per pixel, shape ``(..., H, W, K+1)``.

    Channel layout follows :class:`PartRepresentations`: foreground parts
    first, background last.  Channel sums are 1 per pixel within
    ``PROBABILITY_ATOL``.
    """

    values: Tensor
    temperature_used: float = float("nan")

    def __post_init__(self):
        v = self.values
        if v.dim() < 3 or v.shape[-1] < 2:
            raise ValueError(f"probability map must have shape (..., H, W, K+1), got {tuple(v.shape)}")
        require_finite(v, "probability map")
        with torch.no_grad():
            vd = v.detach()
            lo, hi = vd.min().item(), vd.max().item()
            if lo < 0.0 or hi > 1.0:
                raise ValueError(f"probability values must lie in [0, 1], got range [{lo}, {hi}]")
            err = (vd.sum(dim=-1) - 1.0).abs().max().item()
        if err > PROBABILITY_ATOL:
            raise ValueError(f"probability map channels must sum to 1 per pixel (max deviation {err:.3e})")

    @property
    def k_parts(self) -> int:
        return int(self.values.shape[-1]) - 1


@dataclass(frozen=True)
class SyntheticFeatureMap:
    """Feature map rebuilt as a probability-weighted mix of part vectors."""

    values: Tensor

    def __post_init__(self):
        if self.values.dim() < 3:
            raise ValueError(f"synthetic feature map must have shape (..., H, W, C), got {tuple(self.values.shape)}")
        require_finite(self.values, "synthetic feature map")


@dataclass(frozen=True)
class PartMask:
    """Hard per-pixel part labels for one image.

    ``labels`` is an integer grid in {0..K} with 0 reserved for background.
    When ``soft`` is present it has shape ``(H, W, K+1)`` with channel 0 the
    background probability (note: channel order differs from
    :class:`ProbabilityMap`, where background is last) and ``labels`` equals
    its channel argmax.
    """

    labels: Tensor
    soft: Optional[Tensor] = None

    def __post_init__(self):
        lb = self.labels
        if lb.dim() != 2:
            raise ValueError(f"mask labels must have shape (H, W), got {tuple(lb.shape)}")
        if lb.dtype.is_floating_point or lb.dtype == torch.bool:
            raise ValueError(f"mask labels must be integer typed, got {lb.dtype}")
        if lb.numel() and int(lb.min()) < 0:
            raise ValueError("mask labels must be non-negative")
        if self.soft is not None:
            s = self.soft
            if s.dim() != 3 or s.shape[:2] != lb.shape:
                raise ValueError(f"soft map shape {tuple(s.shape)} does not match labels {tuple(lb.shape)}")
            require_finite(s, "soft mask")
            if int(lb.max()) >= s.shape[-1]:
                raise ValueError("mask labels exceed soft channel count")
            if not torch.equal(s.argmax(dim=-1), lb.long()):
                raise ValueError("mask labels must equal the soft-channel argmax")

    @property
    def k_parts(self) -> int:
        if self.soft is not None:
            return int(self.soft.shape[-1]) - 1
        return int(self.labels.max().item())


def bilinear_resize(fmap: FeatureMap, target: Tuple[int, int]) -> FeatureMap:
    """Resize a feature map with corner-aligned bilinear interpolation.

    The first/last source samples map exactly onto the first/last target
    pixels, so resizing to the source grid is the identity and a constant
    field is a fixed point.
    """
    th, tw = int(target[0]), int(target[1])
    if th < 1 or tw < 1:
        raise ValueError(f"target size must be positive, got {(th, tw)}")
    vals = fmap.values
    h, w, c = vals.shape[-3], vals.shape[-2], vals.shape[-1]
    if (th, tw) == (h, w):
        return fmap
    lead = vals.shape[:-3]
    x = vals.reshape(-1, h, w, c).permute(0, 3, 1, 2)
    y = F.interpolate(x, size=(th, tw), mode="bilinear", align_corners=True)
    out = y.permute(0, 2, 3, 1).reshape(*lead, th, tw, c)
    return FeatureMap(out)


def coordinate_grid(h: int, w: int, dtype: torch.dtype = torch.float32, device=None) -> Tensor:
    """Return a ``(h, w, 2)`` grid with ``grid[i, j] = (i, j)``, zero-based."""
    if h < 1 or w < 1:
        raise ValueError(f"grid dims must be >= 1, got {(h, w)}")
    ii, jj = torch.meshgrid(
        torch.arange(h, dtype=dtype, device=device),
        torch.arange(w, dtype=dtype, device=device),
        indexing="ij",
    )
    return torch.stack((ii, jj), dim=-1)
