"""Command-line surface.

    partdiscover train     --config cfg.json [--steps N] [--out DIR] [overrides]
    partdiscover predict   --ckpt model.ckpt --out DIR [--no-interpolate] IMAGES...
    partdiscover eval      --ckpt model.ckpt --data DIR --protocol landmarks|masks
    partdiscover visualize --ckpt model.ckpt --out DIR [--attention] IMAGE
    partdiscover synth     --spec spec.json --out DIR
    partdiscover swap      --ckpt model.ckpt --out DIR [--sheet] IMAGE_A IMAGE_B

Every command honors ``--seed``; unrecognized ``--dotted.path value`` flags
override config fields.  Exit codes: 2 for configuration errors, 3 for a
non-finite loss during training.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
from PIL import Image as PILImage

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, apply_overrides, load_config
from .core import CheckpointError, ConfigError, Image, NumericError
from .data import FolderDataset, batches
from .evaluation import evaluate_dataset
from .partformer import AttentionRecord, attention_map, extract_parts
from .pipeline import discover_parts, init_state, swap_reconstruct, train_step
from .synth import MASK_PALETTE, SyntheticSpec, write_dataset

SOFTMAP_MAGIC = b"PDSM"


def _palette_flat(n: int) -> List[int]:
    pal = [0] * 768
    for i in range(min(n, len(MASK_PALETTE))):
        pal[3 * i : 3 * i + 3] = MASK_PALETTE[i]
    return pal


def write_mask_png(labels: torch.Tensor, path: Path) -> None:
    arr = labels.cpu().numpy().astype(np.uint8)
    img = PILImage.fromarray(arr, mode="P")
    img.putpalette(_palette_flat(int(arr.max()) + 1))
    img.save(path)


def read_mask_png(path: Path) -> torch.Tensor:
    return torch.from_numpy(np.asarray(PILImage.open(path), dtype=np.int64))


def write_soft_map(soft: torch.Tensor, path: Path) -> None:
    """Raw float32 soft map: 16-byte header (magic, H, W, channels), LE payload."""
    h, w, c = soft.shape
    header = SOFTMAP_MAGIC + np.asarray([h, w, c], dtype="<u4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(soft.cpu().numpy().astype("<f4").tobytes())


def read_soft_map(path: Path) -> torch.Tensor:
    blob = Path(path).read_bytes()
    if blob[:4] != SOFTMAP_MAGIC:
        raise CheckpointError(f"{path}: not a soft-map file")
    h, w, c = np.frombuffer(blob[4:16], dtype="<u4")
    return torch.from_numpy(np.frombuffer(blob[16:], dtype="<f4").reshape(int(h), int(w), int(c)).copy())


def _load_image(path: str, size: Optional[int] = None) -> Image:
    pil = PILImage.open(path).convert("RGB")
    if size is not None and pil.size != (size, size):
        pil = pil.resize((size, size), PILImage.BILINEAR)
    arr = np.asarray(pil, dtype=np.float32) / 255.0
    return Image(torch.from_numpy(arr))


def _collect_overrides(unknown: List[str]) -> Dict[str, str]:
    overrides: Dict[str, str] = {}
    i = 0
    while i < len(unknown):
        token = unknown[i]
        if not token.startswith("--") or "." not in token:
            raise ConfigError(f"unrecognized argument: {token}")
        key = token[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            i += 1
            if i >= len(unknown):
                raise ConfigError(f"missing value for override {token}")
            value = unknown[i]
        overrides[key] = value
        i += 1
    return overrides


def _resolve_config(args, overrides: Dict[str, str]) -> RunConfig:
    if args.config:
        cfg = load_config(args.config, overrides)
    else:
        full = RunConfig().to_dict()
        if overrides:
            full = apply_overrides(full, overrides)
        cfg = RunConfig.from_dict(full)
    if args.seed is not None:
        cfg = RunConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    return cfg


def _dataset_for(cfg: RunConfig):
    if not cfg.data.root:
        raise ConfigError("config has no data.root; point it at a dataset directory")
    return FolderDataset(cfg.data.root)


def cmd_train(args, overrides: Dict[str, str]) -> int:
    cfg = _resolve_config(args, overrides)
    if args.steps is not None:
        cfg = RunConfig.from_dict(apply_overrides(cfg.to_dict(), {"train.steps": str(args.steps)}))
    out_dir = Path(args.out or "runs/train")
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.resume:
        state = load_checkpoint(args.resume)
        cfg = state.config
    else:
        state = init_state(cfg)
    dataset = _dataset_for(cfg)
    stream = batches(dataset, "train", cfg.train.batch, state.generator, with_classes=cfg.data.n_classes > 1)

    log_path = out_dir / "losses.jsonl"
    with open(log_path, "a") as log:
        while state.step < cfg.train.steps:
            batch = next(stream)
            breakdown = train_step(batch, state)
            log.write(json.dumps(breakdown) + "\n")
            if cfg.train.eval_every and breakdown["step"] % cfg.train.eval_every == 0:
                print(
                    f"step {breakdown['step']}: total={breakdown['total']:.5f} rec={breakdown['rec']:.5f} "
                    f"con={breakdown['con']:.5f} area={breakdown['area']:.5f} sc={breakdown['sc']:.5f}"
                )
            if cfg.train.checkpoint_every and breakdown["step"] % cfg.train.checkpoint_every == 0:
                save_checkpoint(state, str(out_dir / f"step_{breakdown['step']:06d}.ckpt"))
    final = out_dir / "final.ckpt"
    save_checkpoint(state, str(final))
    print(f"final checkpoint: {final}")
    return 0


def cmd_predict(args, overrides: Dict[str, str]) -> int:
    state = load_checkpoint(args.ckpt)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    failures = 0
    for path in args.images:
        try:
            image = _load_image(path, state.config.image_size)
        except (OSError, ValueError) as exc:
            print(f"warning: skipping {path}: {exc}", file=sys.stderr)
            failures += 1
            continue
        mask = discover_parts(image, state, interpolate=not args.no_interpolate, class_id=args.class_id)
        stem = Path(path).stem
        write_mask_png(mask.labels, out_dir / f"{stem}_mask.png")
        if args.soft:
            write_soft_map(mask.soft, out_dir / f"{stem}_soft.bin")
    if failures and failures == len(args.images):
        return 1
    return 0


def cmd_eval(args, overrides: Dict[str, str]) -> int:
    state = load_checkpoint(args.ckpt)
    dataset = FolderDataset(args.data)
    report = evaluate_dataset(
        state,
        dataset,
        protocol=args.protocol,
        interpolate=not args.no_interpolate,
        fit_split=args.fit_split,
        eval_split=args.eval_split,
        norm_kind=args.norm,
        config_hash=state.config.hash(),
        max_fit=args.max_fit,
    )
    text = json.dumps(report, indent=2)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return 0


def _overlay(image: Image, labels: torch.Tensor) -> np.ndarray:
    rgb = (image.pixels.numpy() * 255).astype(np.float64)
    colors = np.zeros_like(rgb)
    lab = labels.numpy()
    for value in np.unique(lab):
        if value == 0:
            continue
        colors[lab == value] = MASK_PALETTE[int(value) % len(MASK_PALETTE)]
    blend = np.where((lab > 0)[..., None], 0.5 * rgb + 0.5 * colors, rgb)
    return blend.round().astype(np.uint8)


def cmd_visualize(args, overrides: Dict[str, str]) -> int:
    state = load_checkpoint(args.ckpt)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    image = _load_image(args.image, state.config.image_size)
    mask = discover_parts(image, state, class_id=args.class_id)
    stem = Path(args.image).stem
    PILImage.fromarray(_overlay(image, mask.labels)).save(out_dir / f"{stem}_overlay.png")
    if args.attention:
        embeddings = state.model.embeddings_for(args.class_id)
        _, record = extract_parts(image, state.model.partformer, embeddings)
        side = state.config.image_size
        for part_k in range(state.config.k_parts + 1):
            amap = attention_map(record, part_k)
            arr = amap.numpy()
            arr = arr / arr.max() if arr.max() > 0 else arr
            pil = PILImage.fromarray((arr * 255).round().astype(np.uint8), mode="L")
            pil = pil.resize((side, side), PILImage.NEAREST)
            name = "background" if part_k == state.config.k_parts else f"part{part_k + 1}"
            pil.save(out_dir / f"{stem}_attention_{name}.png")
    return 0


def cmd_synth(args, overrides: Dict[str, str]) -> int:
    with open(args.spec) as fh:
        raw = json.load(fh)
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        spec = SyntheticSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()})
    except TypeError as exc:
        raise ConfigError(f"invalid synthetic spec: {exc}") from exc
    root = write_dataset(spec, args.out)
    print(f"wrote {spec.count} samples to {root}")
    return 0


def cmd_swap(args, overrides: Dict[str, str]) -> int:
    state = load_checkpoint(args.ckpt)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    image_a = _load_image(args.image_a, state.config.image_size)
    image_b = _load_image(args.image_b, state.config.image_size)
    recon_a, recon_b = swap_reconstruct(image_a, image_b, state, class_id=args.class_id)
    arr_a = (recon_a.pixels.numpy() * 255).round().astype(np.uint8)
    arr_b = (recon_b.pixels.numpy() * 255).round().astype(np.uint8)
    path_a = out_dir / f"{Path(args.image_a).stem}_with_{Path(args.image_b).stem}_parts.png"
    path_b = out_dir / f"{Path(args.image_b).stem}_with_{Path(args.image_a).stem}_parts.png"
    PILImage.fromarray(arr_a).save(path_a)
    PILImage.fromarray(arr_b).save(path_b)
    if args.sheet:
        sheet = np.concatenate([arr_a, arr_b], axis=1)
        PILImage.fromarray(sheet).save(out_dir / "swap_sheet.png")
    print(f"wrote {path_a} and {path_b}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="partdiscover", description="Unsupervised part discovery")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train a model")
    train.add_argument("--config")
    train.add_argument("--seed", type=int)
    train.add_argument("--steps", type=int)
    train.add_argument("--out")
    train.add_argument("--resume")
    train.set_defaults(fn=cmd_train)

    predict = sub.add_parser("predict", help="write part-mask PNGs")
    predict.add_argument("images", nargs="+")
    predict.add_argument("--ckpt", required=True)
    predict.add_argument("--out", required=True)
    predict.add_argument("--no-interpolate", action="store_true")
    predict.add_argument("--soft", action="store_true", help="also write raw soft maps")
    predict.add_argument("--class-id", type=int, default=None)
    predict.add_argument("--seed", type=int)
    predict.set_defaults(fn=cmd_predict)

    ev = sub.add_parser("eval", help="score a dataset")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--protocol", required=True, choices=["landmarks", "masks"])
    ev.add_argument("--no-interpolate", action="store_true")
    ev.add_argument("--fit-split", default="train")
    ev.add_argument("--eval-split", default="test")
    ev.add_argument("--norm", default="canvas_diag", choices=["canvas_diag", "bbox_diag", "inter_ocular"])
    ev.add_argument("--max-fit", type=int, default=None)
    ev.add_argument("--out")
    ev.add_argument("--seed", type=int)
    ev.set_defaults(fn=cmd_eval)

    vis = sub.add_parser("visualize", help="overlay masks and attention maps")
    vis.add_argument("image")
    vis.add_argument("--ckpt", required=True)
    vis.add_argument("--out", required=True)
    vis.add_argument("--attention", action="store_true")
    vis.add_argument("--class-id", type=int, default=None)
    vis.add_argument("--seed", type=int)
    vis.set_defaults(fn=cmd_visualize)

    synth = sub.add_parser("synth", help="generate a synthetic dataset")
    synth.add_argument("--spec", required=True)
    synth.add_argument("--out", required=True)
    synth.add_argument("--seed", type=int)
    synth.set_defaults(fn=cmd_synth)

    swap = sub.add_parser("swap", help="reconstruct two images with exchanged parts")
    swap.add_argument("image_a")
    swap.add_argument("image_b")
    swap.add_argument("--ckpt", required=True)
    swap.add_argument("--out", required=True)
    swap.add_argument("--sheet", action="store_true")
    swap.add_argument("--class-id", type=int, default=None)
    swap.add_argument("--seed", type=int)
    swap.set_defaults(fn=cmd_swap)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args, unknown = parser.parse_known_args(argv)
    try:
        overrides = _collect_overrides(unknown)
        if args.seed is not None:
            torch.manual_seed(args.seed)
        return args.fn(args, overrides)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
