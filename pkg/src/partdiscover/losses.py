"""Training constraints: concentration, area, reconstruction and consistency.

Geometric terms act on the soft assignment map (per-part spatial second
moment about the part centroid; reciprocal-saturation minimum-area penalty).
Semantic terms act on reconstructions (perceptual L1 over frozen extractor
features, with an MSE variant kept as an ablation arm) and on the foreground
part vectors (additive angular-margin softmax against shared learnable
anchors).

Shape conventions follow :mod:`partdiscover.transfer`: probability maps are
``(..., H, W, K+1)`` with background last, part matrices ``(..., K, C)``.
Losses reduce leading batch dimensions by mean, so a single unbatched map
gives the per-sample formula exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence, Tuple, Union

import torch
import torch.nn as nn
from torch import Tensor

from .core import (
    ConfigError,
    Image,
    NumericError,
    PartRepresentations,
    ProbabilityMap,
    coordinate_grid,
    require_finite,
)

MapLike = Union[ProbabilityMap, Tensor]
ImageLike = Union[Image, Tensor]

# Slack for the "channels sum to 1" precondition on loss inputs; slightly
# looser than construction-time validation to admit float32 softmax output
# that has been further permuted/sliced.
_NORMALIZED_ATOL = 1e-4


@dataclass(frozen=True)
class LossConfig:
    """Weights and scalar knobs of the combined training objective.

    ``area_prior_frac`` parameterizes the minimum-area prior as a fraction
    of the fair per-part share of the grid: the effective prior is
    ``area_prior_frac * H * W / (K + 1)``, which keeps the setting
    resolution-independent.
    """

    lambda_con: float = 0.3
    lambda_area: float = 0.5
    lambda_sc: float = 0.01
    area_prior_frac: float = 0.5
    scale_s: float = 20.0
    margin_m: float = 0.5
    epsilon: float = 1e-6
    reconstruction: str = "perceptual"
    perceptual: str = "toy_perceptual"

    def __post_init__(self):
        for name in ("lambda_con", "lambda_area", "lambda_sc"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not self.area_prior_frac > 0:
            raise ConfigError("area_prior_frac must be > 0")
        if not 0 <= self.margin_m < math.pi / 2:
            raise ConfigError(f"margin_m must lie in [0, pi/2), got {self.margin_m}")
        if not self.scale_s > 0:
            raise ConfigError("scale_s must be > 0")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be > 0")
        if self.reconstruction not in ("perceptual", "mse"):
            raise ConfigError(f"reconstruction must be 'perceptual' or 'mse', got {self.reconstruction!r}")

    def area_alpha(self, grid: Tuple[int, int], k_parts: int) -> float:
        h, w = grid
        return self.area_prior_frac * h * w / (k_parts + 1)


def _map_values(v: MapLike, what: str = "probability map") -> Tensor:
    vv = v.values if isinstance(v, ProbabilityMap) else v
    if vv.dim() < 3 or vv.shape[-1] < 2:
        raise ValueError(f"{what} must have shape (..., H, W, K+1), got {tuple(vv.shape)}")
    with torch.no_grad():
        err = (vv.detach().sum(dim=-1) - 1.0).abs().max().item()
    if err > _NORMALIZED_ATOL:
        raise ValueError(f"{what} is not normalized (max channel-sum deviation {err:.3e})")
    return vv


def _image_values(x: ImageLike) -> Tensor:
    return x.pixels if isinstance(x, Image) else x


def concentration_loss(v: MapLike, epsilon: float = 1e-6) -> Tensor:
    """Spatial second moment of each foreground part about its centroid.

    The background channel (last) is excluded; a part whose mass sits on a
    single pixel contributes zero.  Batched inputs are averaged.
    """
    vv = _map_values(v)
    h, w = vv.shape[-3], vv.shape[-2]
    fg = vv[..., :-1]
    grid = coordinate_grid(h, w, dtype=vv.dtype, device=vv.device)
    gi, gj = grid[..., 0], grid[..., 1]
    z = fg.sum(dim=(-3, -2)) + epsilon
    ci = torch.einsum("hw,...hwk->...k", gi, fg) / z
    cj = torch.einsum("hw,...hwk->...k", gj, fg) / z
    di = gi.reshape(h, w, 1) - ci.unsqueeze(-2).unsqueeze(-2)
    dj = gj.reshape(h, w, 1) - cj.unsqueeze(-2).unsqueeze(-2)
    per_part = ((di * di + dj * dj) * fg).sum(dim=(-3, -2)) / z
    return per_part.sum(dim=-1).mean()


def area_loss(v: MapLike, alpha: float, epsilon: float = 1e-6) -> Tensor:
    """Reciprocal-saturation penalty on per-channel soft area.

    Includes the background channel; each term is 0.5 when the channel's
    mass equals ``alpha`` and decays toward 0 as the mass grows.
    """
    if not alpha > 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    vv = _map_values(v)
    z = vv.sum(dim=(-3, -2)) + epsilon
    terms = 1.0 / (1.0 + z / alpha)
    return terms.sum(dim=-1).mean()


class PerceptualExtractor(nn.Module):
    """Frozen multi-stage feature extractor for the reconstruction loss.

    Calling it on ``(B, 3, H, W)`` pixels returns one tensor per stage.
    Weights are never trained; parameters are registered with
    ``requires_grad=False`` and the module stays in eval mode.
    """

    def __init__(self, stages: Sequence[nn.Module], descriptor: str):
        super().__init__()
        self.stages = nn.ModuleList(stages)
        self.descriptor = descriptor
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        return super().train(False)

    def forward(self, pixels: Tensor) -> List[Tensor]:
        feats = []
        x = pixels
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class _IdentityStage(nn.Module):
    def forward(self, x: Tensor) -> Tensor:
        return x


def _toy_perceptual_factory() -> PerceptualExtractor:
    # Fixed-random conv stack standing in for a pretrained deep extractor.
    # Stage outputs are rescaled to std ~8 on a seeded probe batch so feature
    # magnitudes (and hence the reconstruction term's weight relative to the
    # geometric terms) match what a real pretrained extractor produces.
    gen = torch.Generator().manual_seed(0x70E5)
    target_std = 8.0
    widths = [16, 32, 64, 64]
    stages = []
    c_in = 3
    for c_out in widths:
        conv = nn.Conv2d(c_in, c_out, kernel_size=3, stride=2, padding=1)
        with torch.no_grad():
            conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (c_in * 9) ** -0.5)
            conv.bias.zero_()
        stages.append(nn.Sequential(conv, nn.LeakyReLU(0.2)))
        c_in = c_out
    with torch.no_grad():
        probe = torch.rand(4, 3, 64, 64, generator=gen)
        x = probe
        for stage in stages:
            x = stage(x)
            stage[0].weight.mul_(target_std / x.std())
            x = x * (target_std / x.std())
    return PerceptualExtractor(stages, "toy_perceptual")


_PERCEPTUAL_FACTORIES: Dict[str, Callable[[], PerceptualExtractor]] = {}


def register_perceptual(descriptor: str, factory: Callable[[], PerceptualExtractor]) -> None:
    if descriptor in _PERCEPTUAL_FACTORIES:
        raise ConfigError(f"perceptual extractor {descriptor!r} is already registered")
    _PERCEPTUAL_FACTORIES[descriptor] = factory


def get_perceptual(descriptor: str) -> PerceptualExtractor:
    try:
        factory = _PERCEPTUAL_FACTORIES[descriptor]
    except KeyError:
        raise ConfigError(
            f"unknown perceptual extractor {descriptor!r}; registered: {sorted(_PERCEPTUAL_FACTORIES)}"
        ) from None
    return factory()


register_perceptual("toy_perceptual", _toy_perceptual_factory)
register_perceptual("identity", lambda: PerceptualExtractor([_IdentityStage()], "identity"))


def _to_bchw(x: ImageLike) -> Tensor:
    t = _image_values(x)
    if t.dim() == 3:
        t = t.unsqueeze(0)
    return t.permute(0, 3, 1, 2)


def perceptual_loss(
    inputs: Tuple[ImageLike, ImageLike],
    recons: Tuple[ImageLike, ImageLike],
    extractor: PerceptualExtractor,
) -> Tensor:
    """L1 distance between extractor features of inputs and reconstructions.

    Per stage the absolute difference is averaged over elements; stages are
    summed, and the two image pairs are summed.
    """
    total = None
    for target, recon in zip(inputs, recons):
        tt, rt = _to_bchw(target), _to_bchw(recon)
        if tt.shape != rt.shape:
            raise ValueError(f"size mismatch: target {tuple(tt.shape)} vs reconstruction {tuple(rt.shape)}")
        for ft, fr in zip(extractor(tt), extractor(rt)):
            term = (ft - fr).abs().mean()
            total = term if total is None else total + term
    return total


def mse_reconstruction_loss(
    inputs: Tuple[ImageLike, ImageLike],
    recons: Tuple[ImageLike, ImageLike],
) -> Tensor:
    """Mean squared pixel error over both pairs (ablation arm)."""
    terms = []
    for target, recon in zip(inputs, recons):
        tt, rt = _image_values(target), _image_values(recon)
        if tt.shape != rt.shape:
            raise ValueError(f"size mismatch: target {tuple(tt.shape)} vs reconstruction {tuple(rt.shape)}")
        terms.append(((tt - rt) ** 2).mean())
    return torch.stack(terms).mean()


class ArcFaceBank(nn.Module):
    """Shared learnable anchor vector per foreground part."""

    def __init__(self, k_parts: int, channels: int):
        super().__init__()
        if k_parts < 2:
            raise ConfigError(f"the consistency loss needs at least 2 foreground parts, got {k_parts}")
        self.anchors = nn.Parameter(torch.randn(k_parts, channels) * channels**-0.5)

    @property
    def k_parts(self) -> int:
        return int(self.anchors.shape[0])


def semantic_consistency_loss(
    g_fg: Union[PartRepresentations, Tensor],
    bank: ArcFaceBank,
    s: float = 20.0,
    m: float = 0.5,
) -> Tensor:
    """Angular-margin softmax tying each part vector to its anchor.

    ``g_fg`` holds the K foreground rows, shape ``(..., K, C)`` (a full
    ``PartRepresentations`` may be passed; its background row is dropped).
    The margin is added to the target angle via
    ``cos(t + m) = cos t * cos m - sin t * sin m`` with ``sin t`` clamped at 0.
    Batched inputs are averaged.
    """
    if isinstance(g_fg, PartRepresentations):
        g = g_fg.foreground()
    else:
        g = g_fg
    k = g.shape[-2]
    if k < 2:
        raise ValueError(f"the consistency loss needs K >= 2 foreground parts, got K={k}")
    if bank.k_parts != k:
        raise ValueError(f"anchor bank has {bank.k_parts} rows, parts have {k}")
    require_finite(g, "part representations")
    norms = g.norm(dim=-1)
    if (norms.detach() < 1e-12).any():
        idx = int((norms.detach() < 1e-12).nonzero()[0][-1])
        raise NumericError(f"part representation row {idx} has zero norm")
    g_hat = g / norms.unsqueeze(-1)
    w_hat = bank.anchors / bank.anchors.norm(dim=-1, keepdim=True)
    # cos[..., k, t] = angle cosine between part k and anchor t
    cos = torch.einsum("...kc,tc->...kt", g_hat, w_hat).clamp(-1.0, 1.0)
    sin = (1.0 - cos * cos).clamp_min(0.0).sqrt()
    cos_margin = cos * math.cos(m) - sin * math.sin(m)
    eye = torch.eye(k, dtype=torch.bool, device=g.device)
    logits = s * torch.where(eye, cos_margin, cos)
    target_logit = logits.diagonal(dim1=-2, dim2=-1)
    per_part = torch.logsumexp(logits, dim=-1) - target_logit
    return per_part.mean()


def total_loss(
    rec: Tensor,
    sc: Union[Tensor, float],
    con: Tensor,
    area: Tensor,
    cfg: LossConfig,
) -> Tuple[Tensor, Dict[str, float]]:
    """Weighted sum of the four constraints plus a per-term breakdown.

    ``con`` and ``area`` are expected to already sum the two transfer
    directions, mirroring the reconstruction term that sums both views.
    """
    raw = {}
    for name, value in (("rec", rec), ("sc", sc), ("con", con), ("area", area)):
        t = torch.as_tensor(value)
        if not torch.isfinite(t.detach()).all():
            raise NumericError(f"loss term '{name}' is non-finite")
        raw[name] = float(t.detach())
    total = rec + cfg.lambda_sc * sc + cfg.lambda_con * con + cfg.lambda_area * area
    breakdown = {
        **raw,
        "weighted_sc": cfg.lambda_sc * raw["sc"],
        "weighted_con": cfg.lambda_con * raw["con"],
        "weighted_area": cfg.lambda_area * raw["area"],
        "total": float(total.detach()),
    }
    return total, breakdown
