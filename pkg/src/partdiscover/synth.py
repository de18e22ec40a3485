"""Synthetic shape dataset: an articulated K-part object on a noisy canvas.

Each sample draws K colored shapes (ellipse / rectangle / triangle polygons)
in a fixed relative ring arrangement, jitters the whole object's pose, and
emits the exact part mask plus part-centroid landmarks.  Generation is
deterministic per (seed, index), so datasets regenerate bitwise-identically.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from PIL import Image as PILImage, ImageDraw

from .core import ConfigError

__all__ = ["SyntheticSpec", "generate_sample", "write_dataset", "MASK_PALETTE"]

# Canonical part colors, used for mask palettes and overlays: background
# black; parts red, green, blue, pink, cyan, yellow, olive, purple.
MASK_PALETTE: Tuple[Tuple[int, int, int], ...] = (
    (0, 0, 0),
    (255, 0, 0),
    (0, 255, 0),
    (0, 0, 255),
    (255, 0, 255),
    (0, 255, 255),
    (255, 255, 0),
    (128, 128, 0),
    (128, 0, 128),
)

_DEFAULT_COLORS = (
    (0.85, 0.20, 0.20),
    (0.20, 0.75, 0.25),
    (0.25, 0.35, 0.85),
    (0.90, 0.80, 0.25),
    (0.80, 0.30, 0.80),
    (0.25, 0.80, 0.80),
    (0.95, 0.55, 0.20),
    (0.55, 0.30, 0.10),
)

_SHAPES = ("ellipse", "rectangle", "triangle")


@dataclass(frozen=True)
class SyntheticSpec:
    k_parts: int = 4
    canvas: Tuple[int, int] = (64, 64)
    count: int = 500
    seed: int = 0
    n_classes: int = 1
    shapes: Tuple[str, ...] = ()
    colors: Tuple[Tuple[float, float, float], ...] = ()
    ring_radius_frac: float = 0.22
    part_size_frac: float = 0.10
    translate_px: float = 5.0
    rotate_deg: float = 20.0
    scale_pct: float = 10.0
    color_jitter: float = 0.05
    background: Tuple[float, float, float] = (0.32, 0.32, 0.36)
    noise_level: float = 0.06

    def __post_init__(self):
        if self.k_parts < 1:
            raise ConfigError("k_parts must be >= 1")
        if self.count < 1:
            raise ConfigError("count must be >= 1")
        if self.n_classes < 1:
            raise ConfigError("n_classes must be >= 1")
        shapes = self.shapes or tuple(_SHAPES[k % len(_SHAPES)] for k in range(self.k_parts))
        if len(shapes) != self.k_parts:
            raise ConfigError(f"need {self.k_parts} shapes, got {len(shapes)}")
        for s in shapes:
            if s not in _SHAPES:
                raise ConfigError(f"unknown shape {s!r}; choose from {_SHAPES}")
        object.__setattr__(self, "shapes", shapes)
        colors = self.colors or _DEFAULT_COLORS[: self.k_parts]
        if len(colors) != self.k_parts:
            raise ConfigError(f"need {self.k_parts} colors, got {len(colors)}")
        for a in range(len(colors)):
            for b in range(a + 1, len(colors)):
                if max(abs(x - y) for x, y in zip(colors[a], colors[b])) < 0.1:
                    raise ConfigError(f"part colors {a} and {b} are too similar to identify parts")
        object.__setattr__(self, "colors", tuple(tuple(c) for c in colors))

    def part_offsets(self, class_id: int = 0) -> List[Tuple[float, float]]:
        """Fixed relative (x, y) part centers; classes rotate the ring."""
        h, w = self.canvas
        r = self.ring_radius_frac * min(h, w)
        phase = 2 * math.pi * class_id / max(self.n_classes, 1) / max(self.k_parts, 1)
        out = []
        for k in range(self.k_parts):
            a = 2 * math.pi * k / self.k_parts + phase
            out.append((r * math.cos(a), r * math.sin(a)))
        return out


def _shape_polygon(shape: str, cx: float, cy: float, size: float, angle: float) -> List[Tuple[float, float]]:
    if shape == "ellipse":
        n = 24
        pts = [(size * math.cos(2 * math.pi * i / n), 0.72 * size * math.sin(2 * math.pi * i / n)) for i in range(n)]
    elif shape == "rectangle":
        pts = [(-size, -0.7 * size), (size, -0.7 * size), (size, 0.7 * size), (-size, 0.7 * size)]
    else:  # triangle
        pts = [(0.0, -1.1 * size), (size, 0.8 * size), (-size, 0.8 * size)]
    ca, sa = math.cos(angle), math.sin(angle)
    return [(cx + ca * x - sa * y, cy + sa * x + ca * y) for x, y in pts]


def generate_sample(spec: SyntheticSpec, index: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    """Deterministically build sample ``index``.

    Returns ``(image_uint8 (H, W, 3), mask (H, W) uint8 in {0..K},
    landmarks (K, 2) float (x, y), class_id)``.
    """
    h, w = spec.canvas
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, index]))
    class_id = index % spec.n_classes

    base = np.asarray(spec.background, dtype=np.float64)
    noise = rng.uniform(-spec.noise_level, spec.noise_level, size=(h, w, 3))
    canvas = np.clip(base + noise, 0.0, 1.0)
    img = PILImage.fromarray((canvas * 255).round().astype(np.uint8))
    mask = PILImage.new("L", (w, h), 0)
    draw_img = ImageDraw.Draw(img)
    draw_mask = ImageDraw.Draw(mask)

    dx, dy = rng.uniform(-spec.translate_px, spec.translate_px, size=2)
    theta = math.radians(rng.uniform(-spec.rotate_deg, spec.rotate_deg))
    s = 1.0 + rng.uniform(-spec.scale_pct, spec.scale_pct) / 100.0
    ca, sa = math.cos(theta), math.sin(theta)
    cx, cy = (w - 1) / 2.0 + dx, (h - 1) / 2.0 + dy
    size = spec.part_size_frac * min(h, w)

    for k, (ox, oy) in enumerate(spec.part_offsets(class_id)):
        px = cx + s * (ca * ox - sa * oy)
        py = cy + s * (sa * ox + ca * oy)
        color = np.asarray(spec.colors[k], dtype=np.float64)
        if spec.color_jitter:
            color = np.clip(color * (1.0 + rng.uniform(-spec.color_jitter, spec.color_jitter, 3)), 0.0, 1.0)
        poly = _shape_polygon(spec.shapes[k], px, py, s * size, theta)
        rgb = tuple(int(v) for v in (color * 255).round())
        draw_img.polygon(poly, fill=rgb)
        draw_mask.polygon(poly, fill=k + 1)

    mask_arr = np.asarray(mask, dtype=np.uint8)
    landmarks = np.zeros((spec.k_parts, 2), dtype=np.float64)
    for k in range(spec.k_parts):
        ys, xs = np.nonzero(mask_arr == k + 1)
        if len(ys) == 0:
            raise RuntimeError(f"part {k + 1} of sample {index} has no visible pixels; shrink jitter or parts")
        landmarks[k] = (xs.mean(), ys.mean())
    return np.asarray(img, dtype=np.uint8), mask_arr, landmarks, class_id


def _palette_flat(k: int) -> List[int]:
    pal = [0] * 768
    for i in range(min(k + 1, len(MASK_PALETTE))):
        pal[3 * i : 3 * i + 3] = MASK_PALETTE[i]
    return pal


def write_dataset(spec: SyntheticSpec, out_dir: str) -> Path:
    """Materialize the dataset in the on-disk folder layout.

    Layout: ``images/*.png``, ``masks/*.png`` (indexed, 0 = background),
    ``landmarks.csv`` (image_id, x1, y1, ...), split lists
    ``train.txt``/``val.txt``/``test.txt`` and, for multi-class specs,
    ``classes.csv``.
    """
    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    pal = _palette_flat(spec.k_parts)

    rows = []
    classes = []
    ids = []
    for i in range(spec.count):
        image, mask, landmarks, class_id = generate_sample(spec, i)
        image_id = f"img_{i:05d}"
        ids.append(image_id)
        PILImage.fromarray(image).save(root / "images" / f"{image_id}.png")
        m = PILImage.fromarray(mask, mode="P")
        m.putpalette(pal)
        m.save(root / "masks" / f"{image_id}.png")
        rows.append([image_id] + [f"{v:.4f}" for v in landmarks.reshape(-1)])
        classes.append([image_id, class_id])

    with open(root / "landmarks.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["image_id"]
        for k in range(spec.k_parts):
            header += [f"x{k + 1}", f"y{k + 1}"]
        writer.writerow(header)
        writer.writerows(rows)

    if spec.n_classes > 1:
        with open(root / "classes.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["image_id", "class_id"])
            writer.writerows(classes)

    n_train = max(1, int(spec.count * 0.7))
    n_val = max(1, int(spec.count * 0.15)) if spec.count >= 3 else 0
    splits = {
        "train": ids[:n_train],
        "val": ids[n_train : n_train + n_val],
        "test": ids[n_train + n_val :],
    }
    for name, members in splits.items():
        (root / f"{name}.txt").write_text("".join(f"{m}\n" for m in members))
    return root
