"""Alignment between part vectors and dense feature maps.

The probability map is the temperature-scaled softmax of raw part/pixel dot
products; the synthetic feature map re-expresses every pixel as the
probability-weighted mix of part vectors.  Exchanging part representations
between two views of the same image is a plain swap.

All three operations are pure functions; they accept either the typed
wrappers from :mod:`partdiscover.core` or raw tensors of the same layout
(``(..., H, W, C)`` maps, ``(..., K+1, C)`` part matrices, trailing batch
dimensions broadcast as in einsum).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple, Union

import torch
from torch import Tensor

from .core import (
    ConfigError,
    FeatureMap,
    PartRepresentations,
    ProbabilityMap,
    SyntheticFeatureMap,
    require_finite,
)

MapLike = Union[FeatureMap, Tensor]
PartsLike = Union[PartRepresentations, Tensor]


@dataclass(frozen=True)
class TransferConfig:
    """Smoothness of the soft assignment; larger temperature = sharper map."""

    temperature: float = 0.8

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")


def _map_values(f: MapLike) -> Tensor:
    return f.values if isinstance(f, FeatureMap) else f


def _part_values(g: PartsLike) -> Tensor:
    return g.values if isinstance(g, PartRepresentations) else g


def scaled_softmax(logits: Tensor) -> Tensor:
    """Softmax over the last dim with per-pixel max subtraction."""
    shifted = logits - logits.detach().amax(dim=-1, keepdim=True)
    e = shifted.exp()
    return e / e.sum(dim=-1, keepdim=True)


def part_pixel_logits(f: MapLike, g: PartsLike, temperature: float) -> Tensor:
    """Scaled raw dot products between part vectors and pixel features.

    No normalization is applied to either side; cosine-style normalization
    belongs only to the angular-margin consistency loss.
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    fv = _map_values(f)
    gv = _part_values(g)
    if fv.shape[-1] != gv.shape[-1]:
        raise ValueError(f"channel mismatch: features have C={fv.shape[-1]}, parts have C={gv.shape[-1]}")
    require_finite(fv, "feature map")
    require_finite(gv, "part representations")
    if gv.dim() == 2:
        logits = torch.einsum("...hwc,kc->...hwk", fv, gv)
    else:
        logits = torch.einsum("...hwc,...kc->...hwk", fv, gv)
    return temperature * logits


def probability_map(f: MapLike, g: PartsLike, temperature: float) -> ProbabilityMap:
    """Soft assignment of each pixel over the K+1 parts (background last)."""
    v = scaled_softmax(part_pixel_logits(f, g, temperature))
    return ProbabilityMap(values=v, temperature_used=float(temperature))


def synthesize(v: Union[ProbabilityMap, Tensor], g: PartsLike) -> SyntheticFeatureMap:
    """Rebuild a dense map as the per-pixel probability-weighted part mix.

    Every output pixel lies in the convex hull of the part vectors.
    """
    vv = v.values if isinstance(v, ProbabilityMap) else v
    gv = _part_values(g)
    if vv.shape[-1] != gv.shape[-2]:
        raise ValueError(f"part-count mismatch: map has {vv.shape[-1]} channels, parts have {gv.shape[-2]} rows")
    if gv.dim() == 2:
        s = torch.einsum("...hwk,kc->...hwc", vv, gv)
    else:
        s = torch.einsum("...hwk,...kc->...hwc", vv, gv)
    return SyntheticFeatureMap(values=s)


def exchange(g1: PartsLike, g2: PartsLike) -> Tuple[PartsLike, PartsLike]:
    """Swap the part representations of two paired views."""
    s1, s2 = _part_values(g1).shape, _part_values(g2).shape
    if s1 != s2:
        raise ValueError(f"shape mismatch: {tuple(s1)} vs {tuple(s2)}")
    return g2, g1
