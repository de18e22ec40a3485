"""Quantitative evaluation: centroid regression error and clustering metrics.

Landmark-annotated data: part centroids are linearly regressed onto labeled
keypoints on a fitting split, and the normalized mean error of the projected
centroids is reported on the held-out split, together with NMI/ARI between
predicted labels at keypoint pixels and keypoint identities (pooled across
the split by default).  Mask-annotated data: NMI/ARI over all pixels plus
foreground-restricted variants.

NMI uses arithmetic-mean normalization; degenerate single-cluster labelings
score 0 by convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from sklearn.metrics import adjusted_rand_score, normalized_mutual_info_score
from torch import Tensor

from .core import ConfigError, EmptyForegroundError, PartMask, ProbabilityMap

__all__ = [
    "CentroidRegressor",
    "LandmarkSet",
    "ari",
    "evaluate_dataset",
    "fg_metrics",
    "fit_regressor",
    "nme",
    "nmi",
    "part_centroids",
]


@dataclass(frozen=True)
class LandmarkSet:
    """Ground-truth keypoints in (row, col) pixel coordinates."""

    points: Tensor
    norm_kind: str
    norm_value: float

    def __post_init__(self):
        if self.points.dim() != 2 or self.points.shape[1] != 2:
            raise ValueError(f"landmarks must have shape (K_gt, 2), got {tuple(self.points.shape)}")
        if not self.norm_value > 0:
            raise ValueError(f"normalization distance must be > 0, got {self.norm_value}")


def part_centroids(v: Union[ProbabilityMap, PartMask, Tensor], epsilon: float = 1e-6) -> Tuple[Tensor, Tensor]:
    """Mass-weighted (row, col) centers and masses of the K foreground parts.

    Accepts a probability map (background channel last), a part mask (uses
    its soft map when present, else one-hot labels), or a raw
    ``(H, W, K+1)`` tensor with background last.  An empty part keeps a
    near-zero mass; callers can flag those via the returned masses.
    """
    if isinstance(v, ProbabilityMap):
        fg = v.values[..., :-1]
    elif isinstance(v, PartMask):
        if v.soft is not None:
            fg = v.soft[..., 1:]
        else:
            k = int(v.labels.max().item())
            fg = torch.stack([(v.labels == i + 1).double() for i in range(k)], dim=-1)
    else:
        fg = v[..., :-1]
    if fg.dim() != 3:
        raise ValueError(f"expected a single (H, W, K+1) map, got shape {tuple(fg.shape)}")
    fg = fg.double()
    h, w = fg.shape[0], fg.shape[1]
    ii = torch.arange(h, dtype=torch.float64).view(h, 1, 1)
    jj = torch.arange(w, dtype=torch.float64).view(1, w, 1)
    masses = fg.sum(dim=(0, 1)) + epsilon
    ci = (ii * fg).sum(dim=(0, 1)) / masses
    cj = (jj * fg).sum(dim=(0, 1)) / masses
    return torch.stack((ci, cj), dim=-1), masses


@dataclass(frozen=True)
class CentroidRegressor:
    """Least-squares linear map (with bias) from centroids to landmarks."""

    weight: np.ndarray  # (2K, 2K_gt)
    bias: np.ndarray  # (2K_gt,)
    residual: float
    used_ridge: bool

    def predict(self, centroids: np.ndarray) -> np.ndarray:
        x = np.asarray(centroids, dtype=np.float64)
        return x @ self.weight + self.bias


def fit_regressor(train_centroids: np.ndarray, train_landmarks: np.ndarray) -> CentroidRegressor:
    """Fit the centroid-to-landmark projection by least squares.

    Falls back to a tiny ridge (1e-6) when the design matrix is rank
    deficient, and reports that in the result.
    """
    x = np.asarray(train_centroids, dtype=np.float64)
    y = np.asarray(train_landmarks, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError(f"incompatible shapes {x.shape} vs {y.shape}")
    n, d = x.shape
    if n < d + 1:
        raise ValueError(f"need at least {d + 1} samples to fit a {d}-input map with bias, got {n}")
    design = np.concatenate([x, np.ones((n, 1))], axis=1)
    rank = np.linalg.matrix_rank(design)
    used_ridge = rank < d + 1
    if used_ridge:
        gram = design.T @ design + 1e-6 * np.eye(d + 1)
        coef = np.linalg.solve(gram, design.T @ y)
    else:
        coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    weight, bias = coef[:-1], coef[-1]
    residual = float(np.mean((design @ coef - y) ** 2))
    return CentroidRegressor(weight=weight, bias=bias, residual=residual, used_ridge=used_ridge)


def nme(pred: Union[Tensor, np.ndarray], gt: LandmarkSet) -> float:
    """Mean Euclidean landmark error normalized by ``gt.norm_value``, in %."""
    p = np.asarray(pred, dtype=np.float64)
    g = gt.points.detach().cpu().numpy().astype(np.float64)
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {p.shape} does not match landmarks {g.shape}")
    dist = np.linalg.norm(p - g, axis=1)
    return float(dist.mean() / gt.norm_value * 100.0)


def _as_labels(a) -> np.ndarray:
    arr = np.asarray(a).reshape(-1)
    return arr


def nmi(a, b) -> float:
    """Normalized mutual information (arithmetic-mean normalization)."""
    la, lb = _as_labels(a), _as_labels(b)
    if la.shape != lb.shape:
        raise ValueError(f"labelings differ in length: {la.shape[0]} vs {lb.shape[0]}")
    if la.size == 0:
        raise ValueError("empty labelings")
    if len(np.unique(la)) < 2 or len(np.unique(lb)) < 2:
        return 0.0
    return float(normalized_mutual_info_score(la, lb, average_method="arithmetic"))


def ari(a, b) -> float:
    """Adjusted Rand index via the standard contingency formula."""
    la, lb = _as_labels(a), _as_labels(b)
    if la.shape != lb.shape:
        raise ValueError(f"labelings differ in length: {la.shape[0]} vs {lb.shape[0]}")
    if la.size == 0:
        raise ValueError("empty labelings")
    if len(np.unique(la)) < 2 and len(np.unique(lb)) >= 2:
        return 0.0
    if len(np.unique(lb)) < 2 and len(np.unique(la)) >= 2:
        return 0.0
    return float(adjusted_rand_score(la, lb))


def fg_metrics(pred: Union[PartMask, Tensor, np.ndarray], gt_mask, background_id: int = 0) -> Tuple[float, float]:
    """NMI/ARI restricted to pixels whose ground-truth label is foreground."""
    p = pred.labels if isinstance(pred, PartMask) else pred
    p = np.asarray(p)
    g = np.asarray(gt_mask)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    fg = g != background_id
    if not fg.any():
        raise EmptyForegroundError("ground truth contains no foreground pixels")
    return nmi(p[fg], g[fg]), ari(p[fg], g[fg])


def _to_resolution(mask: PartMask, target_hw: Tuple[int, int]) -> PartMask:
    h, w = mask.labels.shape
    th, tw = int(target_hw[0]), int(target_hw[1])
    if (h, w) == (th, tw):
        return mask
    if th % h or tw % w:
        raise ConfigError(f"cannot align mask of size {(h, w)} to target {(th, tw)}")
    sy, sx = th // h, tw // w
    labels = mask.labels.repeat_interleave(sy, dim=0).repeat_interleave(sx, dim=1)
    soft = None
    if mask.soft is not None:
        soft = mask.soft.repeat_interleave(sy, dim=0).repeat_interleave(sx, dim=1)
    return PartMask(labels=labels, soft=soft)


def _norm_value(kind: str, landmarks: Tensor, image_hw: Tuple[int, int], inter_ocular: Tuple[int, int]) -> float:
    if kind == "canvas_diag":
        return math.hypot(image_hw[0], image_hw[1])
    if kind == "bbox_diag":
        lo = landmarks.min(dim=0).values
        hi = landmarks.max(dim=0).values
        return float(torch.linalg.vector_norm(hi - lo))
    if kind == "inter_ocular":
        a, b = inter_ocular
        return float(torch.linalg.vector_norm(landmarks[a] - landmarks[b]))
    raise ConfigError(f"unknown normalization kind {kind!r}")


def evaluate_dataset(
    predictor,
    dataset,
    protocol: str,
    interpolate: bool = True,
    fit_split: str = "train",
    eval_split: str = "test",
    norm_kind: str = "canvas_diag",
    inter_ocular: Tuple[int, int] = (0, 1),
    pool_keypoints: bool = True,
    config_hash: Optional[str] = None,
    max_fit: Optional[int] = None,
) -> Dict[str, object]:
    """Run part discovery over a dataset split and score it.

    ``predictor`` is a ``TrainState``/model (dispatched through
    :func:`partdiscover.pipeline.discover_parts`) or any callable
    ``(image_chw, class_id) -> PartMask``.  ``protocol`` selects
    ``"landmarks"`` (regression NME + keypoint NMI/ARI) or ``"masks"``
    (pixel NMI/ARI + foreground-restricted variants).
    """
    from .core import Image
    from .pipeline import discover_parts

    if protocol not in ("landmarks", "masks"):
        raise ConfigError(f"protocol must be 'landmarks' or 'masks', got {protocol!r}")
    if protocol == "landmarks" and not dataset.has_landmarks:
        raise ConfigError("landmark protocol requested but the dataset has no landmarks.csv")
    if protocol == "masks" and not dataset.has_masks:
        raise ConfigError("mask protocol requested but the dataset has no masks/")

    if callable(predictor) and not hasattr(predictor, "model") and not isinstance(predictor, torch.nn.Module):
        raw_predict = predictor
    else:
        def raw_predict(chw: Tensor, class_id: int) -> PartMask:
            image = Image(chw.permute(1, 2, 0).clamp(0.0, 1.0))
            return discover_parts(image, predictor, interpolate=interpolate, class_id=class_id)

    def predict(chw: Tensor, class_id: int) -> PartMask:
        # Feature-resolution masks (interpolate=False) are block-upscaled so
        # they stay comparable against pixel-resolution annotations.
        return _to_resolution(raw_predict(chw, class_id), chw.shape[-2:])

    report: Dict[str, object] = {
        "nme_pct": None,
        "nmi": None,
        "ari": None,
        "fg_nmi": None,
        "fg_ari": None,
        "n_images": 0,
        "protocol": protocol,
        "config_hash": config_hash,
    }

    eval_ids = dataset.ids(eval_split)
    if not eval_ids:
        raise ConfigError(f"split {eval_split!r} is empty")

    if protocol == "landmarks":
        fit_ids = dataset.ids(fit_split)
        if max_fit is not None:
            fit_ids = fit_ids[:max_fit]
        xs, ys = [], []
        for image_id in fit_ids:
            mask = predict(dataset.image(image_id), dataset.class_of(image_id))
            centers, _ = part_centroids(mask)
            xs.append(centers.reshape(-1).numpy())
            ys.append(dataset.landmarks(image_id).reshape(-1).numpy())
        regressor = fit_regressor(np.stack(xs), np.stack(ys))

        errors = []
        labels_pred, labels_gt = [], []
        per_image_nmi, per_image_ari = [], []
        for image_id in eval_ids:
            chw = dataset.image(image_id)
            mask = predict(chw, dataset.class_of(image_id))
            centers, _ = part_centroids(mask)
            landmarks = dataset.landmarks(image_id)
            proj = regressor.predict(centers.reshape(1, -1).numpy()).reshape(-1, 2)
            gt = LandmarkSet(
                points=landmarks,
                norm_kind=norm_kind,
                norm_value=_norm_value(norm_kind, landmarks, chw.shape[-2:], inter_ocular),
            )
            errors.append(nme(proj, gt))
            h, w = mask.labels.shape
            rows = landmarks[:, 0].round().long().clamp(0, h - 1)
            cols = landmarks[:, 1].round().long().clamp(0, w - 1)
            at_kp = mask.labels[rows, cols].numpy()
            kp_ids = np.arange(len(landmarks))
            labels_pred.append(at_kp)
            labels_gt.append(kp_ids)
            if not pool_keypoints:
                per_image_nmi.append(nmi(at_kp, kp_ids))
                per_image_ari.append(ari(at_kp, kp_ids))
        report["nme_pct"] = float(np.mean(errors))
        if pool_keypoints:
            report["nmi"] = nmi(np.concatenate(labels_pred), np.concatenate(labels_gt))
            report["ari"] = ari(np.concatenate(labels_pred), np.concatenate(labels_gt))
        else:
            report["nmi"] = float(np.mean(per_image_nmi))
            report["ari"] = float(np.mean(per_image_ari))
        report["n_images"] = len(eval_ids)
        return report

    preds, gts = [], []
    for image_id in eval_ids:
        mask = predict(dataset.image(image_id), dataset.class_of(image_id))
        gt = dataset.mask(image_id)
        if tuple(gt.shape) != tuple(mask.labels.shape):
            raise ConfigError(
                f"mask size {tuple(gt.shape)} does not match prediction {tuple(mask.labels.shape)}; "
                "use interpolate=True for pixel-resolution masks"
            )
        preds.append(mask.labels.reshape(-1).numpy())
        gts.append(gt.reshape(-1).numpy())
    pred_all, gt_all = np.concatenate(preds), np.concatenate(gts)
    report["nmi"] = nmi(pred_all, gt_all)
    report["ari"] = ari(pred_all, gt_all)
    fg_nmi_val, fg_ari_val = fg_metrics(pred_all, gt_all)
    report["fg_nmi"] = fg_nmi_val
    report["fg_ari"] = fg_ari_val
    report["n_images"] = len(eval_ids)
    return report
