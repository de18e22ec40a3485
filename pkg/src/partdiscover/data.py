"""Dataset access: the on-disk folder layout and an in-memory twin.

Folder layout (see :func:`partdiscover.synth.write_dataset`): ``images/``
holds PNG/JPEG files, ``landmarks.csv`` optional per-image keypoints
(image_id, x1, y1, ...), ``masks/`` optional indexed label PNGs
(0 = background), ``classes.csv`` optional class ids, and
``train.txt``/``val.txt``/``test.txt`` split lists.

Both dataset flavors expose the same duck API: ``ids(split)``,
``image(id) -> (3, H, W) float tensor``, ``landmarks(id) -> (K_gt, 2)
(row, col)``, ``mask(id) -> (H, W) long``, ``class_of(id)``,
``has_landmarks`` / ``has_masks``.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image as PILImage
from torch import Tensor

from .core import ConfigError
from .synth import SyntheticSpec, generate_sample

__all__ = ["FolderDataset", "SyntheticDataset", "batches"]

_SPLITS = ("train", "val", "test")


class FolderDataset:
    def __init__(self, root: str):
        self.root = Path(root)
        if not self.root.is_dir():
            raise ConfigError(f"dataset root does not exist: {self.root}")
        self._splits: Dict[str, List[str]] = {}
        for name in _SPLITS:
            split_file = self.root / f"{name}.txt"
            members = split_file.read_text().split() if split_file.exists() else []
            self._splits[name] = members
        if not any(self._splits.values()):
            self._splits["train"] = sorted(p.stem for p in (self.root / "images").glob("*"))
        self._landmarks = self._read_landmarks()
        self._classes = self._read_classes()
        self._cache: Dict[str, Tensor] = {}
        for split, members in self._splits.items():
            for image_id in members:
                if self._image_path(image_id) is None:
                    raise ConfigError(f"{split} split lists {image_id!r} but no such image exists")

    def _image_path(self, image_id: str) -> Optional[Path]:
        for ext in (".png", ".jpg", ".jpeg"):
            p = self.root / "images" / f"{image_id}{ext}"
            if p.exists():
                return p
        return None

    def _read_landmarks(self) -> Optional[Dict[str, np.ndarray]]:
        path = self.root / "landmarks.csv"
        if not path.exists():
            return None
        out = {}
        with open(path) as fh:
            reader = csv.reader(fh)
            header = next(reader)
            for row in reader:
                coords = np.asarray([float(v) for v in row[1:]], dtype=np.float64).reshape(-1, 2)
                out[row[0]] = coords[:, ::-1].copy()  # csv stores (x, y); keep (row, col)
        return out

    def _read_classes(self) -> Optional[Dict[str, int]]:
        path = self.root / "classes.csv"
        if not path.exists():
            return None
        out = {}
        with open(path) as fh:
            reader = csv.reader(fh)
            next(reader)
            for row in reader:
                out[row[0]] = int(row[1])
        return out

    @property
    def has_landmarks(self) -> bool:
        return self._landmarks is not None

    @property
    def has_masks(self) -> bool:
        return (self.root / "masks").is_dir()

    def ids(self, split: str) -> List[str]:
        if split not in self._splits:
            raise ConfigError(f"unknown split {split!r}")
        return list(self._splits[split])

    def image(self, image_id: str) -> Tensor:
        if image_id not in self._cache:
            path = self._image_path(image_id)
            if path is None:
                raise ConfigError(f"image {image_id!r} not found under {self.root / 'images'}")
            arr = np.asarray(PILImage.open(path).convert("RGB"), dtype=np.float32) / 255.0
            self._cache[image_id] = torch.from_numpy(arr).permute(2, 0, 1)
        return self._cache[image_id]

    def landmarks(self, image_id: str) -> Tensor:
        if self._landmarks is None or image_id not in self._landmarks:
            raise ConfigError(f"no landmarks for {image_id!r}")
        return torch.from_numpy(self._landmarks[image_id])

    def mask(self, image_id: str) -> Tensor:
        path = self.root / "masks" / f"{image_id}.png"
        if not path.exists():
            raise ConfigError(f"no mask for {image_id!r}")
        return torch.from_numpy(np.asarray(PILImage.open(path), dtype=np.int64))

    def class_of(self, image_id: str) -> int:
        if self._classes is None:
            return 0
        return self._classes[image_id]


class SyntheticDataset:
    """In-memory dataset generated on construction from a SyntheticSpec."""

    def __init__(self, spec: SyntheticSpec):
        self.spec = spec
        images, masks, landmarks, classes = [], [], [], []
        for i in range(spec.count):
            img, mask, lm, class_id = generate_sample(spec, i)
            images.append(torch.from_numpy(img.astype(np.float32) / 255.0).permute(2, 0, 1))
            masks.append(torch.from_numpy(mask.astype(np.int64)))
            landmarks.append(torch.from_numpy(lm[:, ::-1].copy()))  # (x, y) -> (row, col)
            classes.append(class_id)
        self._images = images
        self._masks = masks
        self._landmarks = landmarks
        self._classes = classes
        n_train = max(1, int(spec.count * 0.7))
        n_val = max(1, int(spec.count * 0.15)) if spec.count >= 3 else 0
        self._splits = {
            "train": list(range(n_train)),
            "val": list(range(n_train, n_train + n_val)),
            "test": list(range(n_train + n_val, spec.count)),
        }

    has_landmarks = True
    has_masks = True

    def ids(self, split: str) -> List[int]:
        if split not in self._splits:
            raise ConfigError(f"unknown split {split!r}")
        return list(self._splits[split])

    def image(self, i: int) -> Tensor:
        return self._images[i]

    def landmarks(self, i: int) -> Tensor:
        return self._landmarks[i]

    def mask(self, i: int) -> Tensor:
        return self._masks[i]

    def class_of(self, i: int) -> int:
        return self._classes[i]


def batches(
    dataset,
    split: str,
    batch_size: int,
    generator: torch.Generator,
    with_classes: bool = False,
) -> Iterator[Tuple[Tensor, Optional[Tensor]]]:
    """Endless stream of uniformly sampled batches from one split.

    Sampling consumes only the supplied generator, so training order is
    fully determined by (and resumable from) the generator state.
    """
    ids = dataset.ids(split)
    if not ids:
        raise ConfigError(f"split {split!r} is empty")
    while True:
        idx = torch.randint(len(ids), (batch_size,), generator=generator)
        images = torch.stack([dataset.image(ids[i]) for i in idx.tolist()])
        classes = None
        if with_classes:
            classes = torch.tensor([dataset.class_of(ids[i]) for i in idx.tolist()], dtype=torch.long)
        yield images, classes
