"""Model assembly, the two-stream training step, and inference.

Training (per step): generate two jittered views of each image, encode dense
feature maps and extract part representations from both, exchange the part
representations across the pair, soft-assign each view's pixels to the
exchanged parts, rebuild synthetic feature maps, decode reconstructions, and
apply the combined objective.  Inference runs a single stream: the part
representations act as detectors on the (optionally upsampled) feature map
and the per-pixel argmax is the predicted part mask.

Checkpointing lives in :mod:`partdiscover.checkpoint`; paired-view warps in
:mod:`partdiscover.augment`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from . import losses as L
from .augment import AugmentSpec, sample_params, warp_images
from .config import RunConfig
from .core import ConfigError, Image, NumericError, PartMask, bilinear_resize, FeatureMap
from .decoder import Decoder, DecoderConfig
from .encoders import EncoderConfig, build_encoder
from .losses import ArcFaceBank, PerceptualExtractor, get_perceptual
from .partformer import PartEmbeddings, PartFormer, PartFormerConfig
from .transfer import probability_map, synthesize

__all__ = [
    "EmbeddingBank",
    "PartDiscoveryModel",
    "TrainState",
    "build_model",
    "discover_parts",
    "init_state",
    "make_optimizer",
    "select_embeddings",
    "swap_reconstruct",
    "train_step",
]


class EmbeddingBank(nn.Module):
    """Per-class foreground part embeddings plus one shared background row.

    Row layout: class ``c`` owns rows ``[cK, cK + K)``; the final row is the
    background embedding shared by every class.
    """

    def __init__(self, k_parts: int, n_classes: int, dim: int):
        super().__init__()
        if k_parts < 1 or n_classes < 1:
            raise ConfigError("k_parts and n_classes must be >= 1")
        self.k_parts = k_parts
        self.n_classes = n_classes
        self.values = nn.Parameter(torch.zeros(k_parts * n_classes + 1, dim))
        nn.init.trunc_normal_(self.values, std=0.02, a=-0.04, b=0.04)

    def select(self, class_id: int) -> Tensor:
        if not 0 <= class_id < self.n_classes:
            raise ValueError(f"class id {class_id} out of range [0, {self.n_classes - 1}]")
        k = self.k_parts
        return torch.cat([self.values[class_id * k : (class_id + 1) * k], self.values[-1:]], dim=0)


def select_embeddings(bank: EmbeddingBank, class_id: int) -> PartEmbeddings:
    """Class-specific (K+1, d) embedding rows; gradients route to the bank."""
    return PartEmbeddings(bank.select(class_id))


class PartDiscoveryModel(nn.Module):
    """Encoder + part transformer + decoder (+ anchors / embedding bank)."""

    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.cfg = cfg
        enc_cfg = EncoderConfig(
            mode=cfg.encoder.mode,
            out_channels=cfg.channels,
            base_channels=cfg.encoder.base_channels,
            reduction_blocks=cfg.encoder.reduction_blocks,
            backbone=cfg.encoder.backbone,
        )
        self.encoder = build_encoder(enc_cfg)
        if cfg.image_size % self.encoder.total_stride:
            raise ConfigError(
                f"image_size {cfg.image_size} is not divisible by encoder stride {self.encoder.total_stride}"
            )
        pf_cfg = PartFormerConfig(
            k_parts=cfg.k_parts,
            out_channels=cfg.channels,
            image_size=(cfg.image_size, cfg.image_size),
            layers=cfg.partformer.layers,
            heads=cfg.partformer.heads,
            hidden=cfg.partformer.hidden,
            mlp_dim=cfg.partformer.mlp_dim,
            patch=cfg.partformer.patch,
            own_embeddings=cfg.data.n_classes == 1,
        )
        self.partformer = PartFormer(pf_cfg)
        self.decoder = Decoder(DecoderConfig(in_channels=cfg.channels, widths=cfg.decoder.widths))
        self.arcface = ArcFaceBank(cfg.k_parts, cfg.channels) if cfg.k_parts >= 2 else None
        if cfg.data.n_classes > 1:
            self.bank = EmbeddingBank(cfg.k_parts, cfg.data.n_classes, cfg.partformer.hidden)
        else:
            self.bank = None

    @property
    def feature_grid(self) -> Tuple[int, int]:
        s = self.encoder.total_stride
        return (self.cfg.image_size // s, self.cfg.image_size // s)

    def embeddings_for(self, class_id: Optional[int]) -> Optional[Tensor]:
        if self.bank is None:
            return None
        return self.bank.select(class_id or 0)


def build_model(cfg: RunConfig) -> PartDiscoveryModel:
    """Construct the model with seeded initialization in the configured dtype."""
    torch.manual_seed(cfg.seed)
    model = PartDiscoveryModel(cfg)
    if cfg.dtype == "float64":
        model.double()
    return model


def make_optimizer(model: PartDiscoveryModel, cfg: RunConfig) -> torch.optim.AdamW:
    """AdamW with decoupled weight decay on conv/linear weights only.

    Embeddings, normalization parameters, biases, the consistency anchors and
    the embedding bank take no weight decay; besides being standard practice,
    this keeps bank rows that received no gradient bitwise unchanged.
    """
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        if p.ndim <= 1 or "embed" in name or "anchors" in name or name.startswith("bank."):
            no_decay.append(p)
        else:
            decay.append(p)
    groups = [
        {"params": decay, "weight_decay": cfg.train.weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]
    return torch.optim.AdamW(groups, lr=cfg.train.lr, betas=(cfg.train.beta1, cfg.train.beta2))


@dataclass
class TrainState:
    model: PartDiscoveryModel
    optimizer: torch.optim.AdamW
    generator: torch.Generator
    perceptual: PerceptualExtractor
    config: RunConfig
    step: int = 0


def init_state(cfg: RunConfig) -> TrainState:
    model = build_model(cfg)
    optimizer = make_optimizer(model, cfg)
    generator = torch.Generator().manual_seed(cfg.seed)
    perceptual = get_perceptual(cfg.loss.perceptual)
    if cfg.dtype == "float64":
        perceptual.double()
    return TrainState(model=model, optimizer=optimizer, generator=generator, perceptual=perceptual, config=cfg)


def _model_dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def _reconstruction_target(images: Tensor, out_hw: Tuple[int, int]) -> Tensor:
    if images.shape[-2:] == out_hw:
        return images
    return F.interpolate(images, size=out_hw, mode="bilinear", align_corners=True)


def _stream_losses(
    model: PartDiscoveryModel,
    view1: Tensor,
    view2: Tensor,
    embeddings: Optional[Tensor],
    cfg: RunConfig,
    perceptual: PerceptualExtractor,
) -> Dict[str, Tensor]:
    """Two-stream forward pass returning unweighted loss terms."""
    tau = cfg.transfer.temperature
    f1 = model.encoder(view1).permute(0, 2, 3, 1)
    f2 = model.encoder(view2).permute(0, 2, 3, 1)
    g1, _ = model.partformer(view1, embeddings)
    g2, _ = model.partformer(view2, embeddings)
    if cfg.train.exchange:
        ga, gb = g2, g1
    else:
        ga, gb = g1, g2
    v_to1 = probability_map(f1, ga, tau)
    v_to2 = probability_map(f2, gb, tau)
    s_to1 = synthesize(v_to1, ga).values.permute(0, 3, 1, 2)
    s_to2 = synthesize(v_to2, gb).values.permute(0, 3, 1, 2)
    r1 = model.decoder(s_to1)
    r2 = model.decoder(s_to2)
    t1 = _reconstruction_target(view1, r1.shape[-2:])
    t2 = _reconstruction_target(view2, r2.shape[-2:])
    pairs_t = (t1.permute(0, 2, 3, 1), t2.permute(0, 2, 3, 1))
    pairs_r = (r1.permute(0, 2, 3, 1), r2.permute(0, 2, 3, 1))
    if cfg.loss.reconstruction == "mse":
        rec = L.mse_reconstruction_loss(pairs_t, pairs_r)
    else:
        rec = L.perceptual_loss(pairs_t, pairs_r, perceptual)
    con = L.concentration_loss(v_to1, cfg.loss.epsilon) + L.concentration_loss(v_to2, cfg.loss.epsilon)
    h, w = v_to1.values.shape[-3], v_to1.values.shape[-2]
    alpha = cfg.loss.area_alpha((h, w), cfg.k_parts)
    area = L.area_loss(v_to1, alpha, cfg.loss.epsilon) + L.area_loss(v_to2, alpha, cfg.loss.epsilon)
    if model.arcface is not None and cfg.loss.lambda_sc > 0:
        sc = 0.5 * (
            L.semantic_consistency_loss(g1[..., :-1, :], model.arcface, cfg.loss.scale_s, cfg.loss.margin_m)
            + L.semantic_consistency_loss(g2[..., :-1, :], model.arcface, cfg.loss.scale_s, cfg.loss.margin_m)
        )
    else:
        sc = torch.zeros((), dtype=rec.dtype)
    return {"rec": rec, "sc": sc, "con": con, "area": area}


def train_step(batch: Union[Tensor, Tuple[Tensor, Optional[Tensor]]], state: TrainState) -> Dict[str, float]:
    """One optimizer update on a batch of ``(B, 3, H, W)`` images.

    Multi-class batches (a ``(images, class_ids)`` tuple) are grouped by
    class so one bank selection serves each sub-batch; group losses are
    recombined weighted by group size.  Returns the loss breakdown.
    """
    model, cfg = state.model, state.config
    if isinstance(batch, (tuple, list)):
        images, class_ids = batch
    else:
        images, class_ids = batch, None
    images = images.to(_model_dtype(model))
    b = images.shape[0]
    params1 = [sample_params(cfg.augment, state.generator) for _ in range(b)]
    params2 = [sample_params(cfg.augment, state.generator) for _ in range(b)]
    view1 = warp_images(images, params1).clamp(0.0, 1.0)
    view2 = warp_images(images, params2).clamp(0.0, 1.0)

    model.train()
    if model.bank is not None:
        if class_ids is None:
            class_ids = torch.zeros(b, dtype=torch.long)
        terms: Dict[str, Tensor] = {}
        for value in class_ids.unique().tolist():
            sel = class_ids == value
            group = _stream_losses(
                model, view1[sel], view2[sel], model.bank.select(int(value)), cfg, state.perceptual
            )
            frac = sel.sum().item() / b
            for key, term in group.items():
                terms[key] = terms.get(key, 0.0) + frac * term
    else:
        terms = _stream_losses(model, view1, view2, None, cfg, state.perceptual)

    try:
        total, breakdown = L.total_loss(terms["rec"], terms["sc"], terms["con"], terms["area"], cfg.loss)
    except NumericError as exc:
        raise NumericError(f"{exc} at step {state.step}") from exc

    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    state.step += 1
    breakdown["step"] = state.step
    return breakdown


def _single_image_forward(model: PartDiscoveryModel, image: Image, class_id: Optional[int]):
    pixels = image.pixels.permute(2, 0, 1).unsqueeze(0).to(_model_dtype(model))
    feats = model.encoder(pixels)
    embeddings = model.embeddings_for(class_id)
    g, _ = model.partformer(pixels, embeddings)
    return feats, g[0]


def discover_parts(
    image: Image,
    state: Union[TrainState, PartDiscoveryModel],
    interpolate: bool = True,
    class_id: Optional[int] = None,
) -> PartMask:
    """Predict a per-pixel part mask for one image.

    The feature map is bilinearly upsampled to image resolution before the
    soft assignment when ``interpolate`` is set; otherwise labels come out at
    feature resolution.  The returned soft map stores background in channel 0
    so labels equal the channel argmax (0 = background, k = part k).
    """
    model = state.model if isinstance(state, TrainState) else state
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            feats, g = _single_image_forward(model, image, class_id)
            fmap = FeatureMap(feats[0].permute(1, 2, 0))
            if interpolate:
                fmap = bilinear_resize(fmap, image.size)
            v = probability_map(fmap, g, model.cfg.transfer.temperature).values
    finally:
        model.train(was_training)
    soft = torch.cat([v[..., -1:], v[..., :-1]], dim=-1)
    labels = soft.argmax(dim=-1)
    return PartMask(labels=labels, soft=soft)


def swap_reconstruct(
    image_a: Image,
    image_b: Image,
    state: Union[TrainState, PartDiscoveryModel],
    class_id: Optional[int] = None,
) -> Tuple[Image, Image]:
    """Reconstruct each image with the other's foreground part vectors.

    Background rows stay with their own image; each reconstruction uses its
    own feature map for the soft assignment.
    """
    model = state.model if isinstance(state, TrainState) else state
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            fa, ga = _single_image_forward(model, image_a, class_id)
            fb, gb = _single_image_forward(model, image_b, class_id)
            swapped_a = torch.cat([gb[:-1], ga[-1:]], dim=0)
            swapped_b = torch.cat([ga[:-1], gb[-1:]], dim=0)
            out = []
            for feats, g in ((fa, swapped_a), (fb, swapped_b)):
                fmap = feats[0].permute(1, 2, 0)
                v = probability_map(fmap, g, model.cfg.transfer.temperature)
                s = synthesize(v, g).values.permute(2, 0, 1).unsqueeze(0)
                out.append(Image(model.decoder(s)[0].permute(1, 2, 0)))
    finally:
        model.train(was_training)
    return out[0], out[1]
