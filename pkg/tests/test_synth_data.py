import hashlib
from pathlib import Path

import numpy as np
import pytest
import torch

from partdiscover.core import ConfigError
from partdiscover.data import FolderDataset, SyntheticDataset, batches
from partdiscover.synth import SyntheticSpec, generate_sample, write_dataset

SPEC = SyntheticSpec(k_parts=4, canvas=(64, 64), count=24, seed=7)


def _tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            h.update(path.relative_to(root).as_posix().encode())
            h.update(path.read_bytes())
    return h.hexdigest()


def test_generation_is_bitwise_deterministic(tmp_path):
    a = write_dataset(SPEC, tmp_path / "a")
    b = write_dataset(SPEC, tmp_path / "b")
    assert _tree_digest(a) == _tree_digest(b)


def test_every_part_visible_in_every_image():
    for i in range(SPEC.count):
        _, mask, _, _ = generate_sample(SPEC, i)
        for k in range(1, SPEC.k_parts + 1):
            assert (mask == k).sum() >= 1


def test_landmarks_csv_layout(tmp_path):
    root = write_dataset(SPEC, tmp_path / "d")
    lines = (root / "landmarks.csv").read_text().strip().splitlines()
    assert len(lines) == SPEC.count + 1  # header + one row per image
    assert lines[0].split(",") == ["image_id"] + [f"{a}{k}" for k in range(1, 5) for a in ("x", "y")]
    assert all(len(line.split(",")) == 1 + 2 * SPEC.k_parts for line in lines[1:])


def test_split_files_partition_ids(tmp_path):
    root = write_dataset(SPEC, tmp_path / "d")
    ids = []
    for name in ("train", "val", "test"):
        ids += (root / f"{name}.txt").read_text().split()
    assert sorted(ids) == [f"img_{i:05d}" for i in range(SPEC.count)]


def test_degenerate_colors_rejected():
    with pytest.raises(ConfigError, match="similar"):
        SyntheticSpec(k_parts=2, colors=((0.5, 0.5, 0.5), (0.52, 0.5, 0.5)))


def test_mask_png_roundtrip_is_label_exact(tmp_path):
    root = write_dataset(SPEC, tmp_path / "d")
    ds = FolderDataset(str(root))
    for i, image_id in enumerate(ds.ids("train")[:5]):
        _, mask, _, _ = generate_sample(SPEC, i)
        assert torch.equal(ds.mask(image_id), torch.from_numpy(mask.astype(np.int64)))


def test_folder_matches_in_memory(tmp_path):
    root = write_dataset(SPEC, tmp_path / "d")
    folder = FolderDataset(str(root))
    memory = SyntheticDataset(SPEC)
    fid = folder.ids("train")[3]
    assert torch.allclose(folder.image(fid), memory.image(3), atol=1e-7)
    assert torch.equal(folder.mask(fid), memory.mask(3))
    assert torch.allclose(folder.landmarks(fid), memory.landmarks(3), atol=5e-4)


def test_landmarks_are_row_col(tmp_path):
    # The csv stores (x, y); loaders convert to (row, col) = (y, x).
    root = write_dataset(SPEC, tmp_path / "d")
    ds = FolderDataset(str(root))
    image_id = ds.ids("train")[0]
    idx = int(image_id.split("_")[1])
    _, mask, landmarks_xy, _ = generate_sample(SPEC, idx)
    got = ds.landmarks(image_id)
    assert got[0, 0] == pytest.approx(landmarks_xy[0, 1], abs=1e-3)  # row == y
    assert got[0, 1] == pytest.approx(landmarks_xy[0, 0], abs=1e-3)  # col == x


def test_missing_listed_image_rejected(tmp_path):
    root = write_dataset(SPEC, tmp_path / "d")
    (root / "train.txt").write_text("img_99999\n")
    with pytest.raises(ConfigError, match="img_99999"):
        FolderDataset(str(root))


def test_multi_class_writes_classes_csv(tmp_path):
    spec = SyntheticSpec(k_parts=3, canvas=(48, 48), count=8, seed=1, n_classes=2)
    root = write_dataset(spec, tmp_path / "mc")
    assert (root / "classes.csv").exists()
    ds = FolderDataset(str(root))
    assert ds.class_of("img_00001") == 1
    assert ds.class_of("img_00002") == 0


def test_batches_are_deterministic_given_generator():
    ds = SyntheticDataset(SPEC)
    g1 = torch.Generator().manual_seed(3)
    g2 = torch.Generator().manual_seed(3)
    b1, _ = next(batches(ds, "train", 4, g1))
    b2, _ = next(batches(ds, "train", 4, g2))
    assert torch.equal(b1, b2)
    assert b1.shape == (4, 3, 64, 64)


def test_background_never_empty():
    for i in range(5):
        _, mask, _, _ = generate_sample(SPEC, i)
        assert (mask == 0).sum() > 0
