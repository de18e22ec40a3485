"""Desk-scale experiment drivers shared by tests and scripts/.

Everything here runs on the in-memory synthetic dataset in minutes on a CPU:
short trainings, the collapse guard (area term disabled vs full loss),
rotation-consistency scoring, and foreground-ARI scoring of trained models.
"""

from __future__ import annotations

from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import torch

from .augment import AffineParams, warp_images, warp_labels
from .config import RunConfig
from .core import Image
from .data import SyntheticDataset, batches
from .evaluation import evaluate_dataset
from .pipeline import TrainState, discover_parts, init_state, train_step
from .synth import SyntheticSpec

__all__ = [
    "background_mass",
    "collapse_guard",
    "desk_config",
    "desk_spec",
    "fg_ari",
    "boundary_band_iou",
    "rotation_consistency_iou",
    "train_on_synthetic",
]


def desk_spec(count: int = 500, seed: int = 0, k_parts: int = 4) -> SyntheticSpec:
    return SyntheticSpec(k_parts=k_parts, canvas=(64, 64), count=count, seed=seed)


def desk_config(
    seed: int = 0,
    steps: int = 2000,
    batch: int = 8,
    k_parts: int = 4,
    exchange: bool = True,
    reconstruction: str = "perceptual",
    lambda_area: float = 0.5,
    dtype: str = "float32",
) -> RunConfig:
    """Small scratch-mode configuration for 64x64 synthetic data."""
    return RunConfig.from_dict(
        {
            "seed": seed,
            "dtype": dtype,
            "k_parts": k_parts,
            "image_size": 64,
            "channels": 48,
            "encoder": {"mode": "scratch", "base_channels": 24},
            "partformer": {"layers": 3, "heads": 4, "hidden": 96, "mlp_dim": 192, "patch": 16},
            "decoder": {"widths": [64, 48, 48, 32, 32]},
            "loss": {
                "lambda_con": 0.5,
                "lambda_area": lambda_area,
                "lambda_sc": 0.01,
                "reconstruction": reconstruction,
            },
            "train": {"batch": batch, "steps": steps, "exchange": exchange, "eval_every": 0},
        }
    )


def train_on_synthetic(
    cfg: RunConfig,
    dataset: SyntheticDataset,
    steps: Optional[int] = None,
    log_every: int = 0,
) -> Tuple[TrainState, List[Dict[str, float]]]:
    state = init_state(cfg)
    stream = batches(dataset, "train", cfg.train.batch, state.generator, with_classes=cfg.data.n_classes > 1)
    trace: List[Dict[str, float]] = []
    n = steps if steps is not None else cfg.train.steps
    for _ in range(n):
        breakdown = train_step(next(stream), state)
        trace.append(breakdown)
        if log_every and breakdown["step"] % log_every == 0:
            print(f"step {breakdown['step']}: total={breakdown['total']:.4f} area={breakdown['area']:.4f}")
    return state, trace


def background_mass(state: TrainState, dataset: SyntheticDataset, split: str = "val", limit: int = 32) -> float:
    """Mean background probability over pixels at feature resolution."""
    total, count = 0.0, 0
    for i in dataset.ids(split)[:limit]:
        image = Image(dataset.image(i).permute(1, 2, 0))
        mask = discover_parts(image, state, interpolate=False, class_id=dataset.class_of(i))
        total += float(mask.soft[..., 0].mean())
        count += 1
    return total / max(count, 1)


def collapse_guard(seed: int = 0, steps: int = 200, count: int = 500) -> Dict[str, float]:
    """Train twice (area term off vs full loss); report background mass."""
    dataset = SyntheticDataset(desk_spec(count=count, seed=seed))
    out = {}
    for name, lam in (("no_area", 0.0), ("full", 0.5)):
        cfg = desk_config(seed=seed, steps=steps, lambda_area=lam)
        state, _ = train_on_synthetic(cfg, dataset)
        out[name] = background_mass(state, dataset)
    return out


def fg_ari(state: TrainState, dataset: SyntheticDataset, split: str = "test", interpolate: bool = True) -> float:
    report = evaluate_dataset(state, dataset, protocol="masks", interpolate=interpolate, eval_split=split)
    return float(report["fg_ari"])


def rotation_consistency_iou(
    state: TrainState,
    dataset: SyntheticDataset,
    split: str = "val",
    angle_deg: float = 15.0,
    limit: int = 24,
) -> float:
    """Mean foreground IoU between masks of rotated inputs (warped back) and
    masks of the originals, over +/- the given angle.

    Only pixels whose back-warp stays in frame count, so reflection fill
    never scores.
    """
    model = state.model if isinstance(state, TrainState) else state
    k = model.cfg.k_parts
    scores = []
    for i in dataset.ids(split)[:limit]:
        chw = dataset.image(i)
        base = discover_parts(Image(chw.permute(1, 2, 0)), state, class_id=dataset.class_of(i))
        for sign in (1.0, -1.0):
            params = AffineParams(angle_deg=sign * angle_deg)
            rotated = warp_images(chw.unsqueeze(0), [params])[0].clamp(0.0, 1.0)
            mask_rot = discover_parts(Image(rotated.permute(1, 2, 0)), state, class_id=dataset.class_of(i))
            back, valid = warp_labels(mask_rot.labels, params.inverse())
            ious = []
            for part in range(1, k + 1):
                a = (base.labels == part) & valid
                b = (back == part) & valid
                union = (a | b).sum().item()
                if union:
                    ious.append((a & b).sum().item() / union)
            if ious:
                scores.append(sum(ious) / len(ious))
    return sum(scores) / max(len(scores), 1)


def boundary_band_iou(
    state: TrainState,
    dataset: SyntheticDataset,
    split: str = "test",
    interpolate: bool = True,
    band: int = 2,
    limit: int = 32,
) -> float:
    """Mean foreground IoU restricted to a band around true part boundaries.

    Measures how tightly predicted masks follow part outlines; the band is
    all pixels within ``band`` Chebyshev distance of a label change in the
    ground truth.
    """
    k = (state.model if isinstance(state, TrainState) else state).cfg.k_parts
    scores = []
    for i in dataset.ids(split)[:limit]:
        chw = dataset.image(i)
        gt = dataset.mask(i)
        mask = discover_parts(Image(chw.permute(1, 2, 0)), state, interpolate=interpolate, class_id=dataset.class_of(i))
        pred = mask.labels
        if pred.shape != gt.shape:
            sy, sx = gt.shape[0] // pred.shape[0], gt.shape[1] // pred.shape[1]
            pred = pred.repeat_interleave(sy, dim=0).repeat_interleave(sx, dim=1)
        edge = _boundary_band(gt, band)
        ious = []
        for part in range(1, k + 1):
            a = (pred == part) & edge
            b = (gt == part) & edge
            union = (a | b).sum().item()
            if union:
                ious.append((a & b).sum().item() / union)
        if ious:
            scores.append(sum(ious) / len(ious))
    return sum(scores) / max(len(scores), 1)


def _boundary_band(labels: torch.Tensor, band: int) -> torch.Tensor:
    diff = torch.zeros_like(labels, dtype=torch.bool)
    diff[:-1] |= labels[:-1] != labels[1:]
    diff[1:] |= labels[:-1] != labels[1:]
    diff[:, :-1] |= labels[:, :-1] != labels[:, 1:]
    diff[:, 1:] |= labels[:, :-1] != labels[:, 1:]
    out = diff.clone()
    for _ in range(band):
        grown = out.clone()
        grown[:-1] |= out[1:]
        grown[1:] |= out[:-1]
        grown[:, :-1] |= out[:, 1:]
        grown[:, 1:] |= out[:, :-1]
        out = grown
    return out
