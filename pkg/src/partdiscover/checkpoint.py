"""Named-tensor checkpoint archive.

Single file: an 8-byte magic, a little-endian uint64 manifest length, a JSON
manifest, then raw little-endian IEEE-754 tensor payloads.  The manifest
lists every tensor (name, dtype, shape, byte offset, byte count) plus the
config snapshot, step counter and the non-tensor skeleton of the optimizer
state.  Round-tripping restores forward passes bitwise: model parameters and
buffers, optimizer moments and the batch/augment RNG state all travel in the
payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Dict, List

import torch
from torch import Tensor

from .checkpoint_codec import decode_tensor, encode_tensor  # noqa: F401  (split keeps dtype table in one place)
from .config import RunConfig
from .core import CheckpointError
from .losses import get_perceptual
from .pipeline import TrainState, build_model, make_optimizer

__all__ = ["load_checkpoint", "read_manifest", "save_checkpoint"]

MAGIC = b"PDCKPT01"
FORMAT_VERSION = 1


def _flatten_tensors(tree: Any, prefix: str, sink: Dict[str, Tensor]) -> Any:
    """Replace tensors in a nested structure with manifest references."""
    if isinstance(tree, Tensor):
        sink[prefix] = tree
        return {"__tensor__": prefix}
    if isinstance(tree, dict):
        return {str(k): _flatten_tensors(v, f"{prefix}.{k}", sink) for k, v in tree.items()}
    if isinstance(tree, (list, tuple)):
        out = [_flatten_tensors(v, f"{prefix}.{i}", sink) for i, v in enumerate(tree)]
        return out
    return tree


def _restore_tensors(tree: Any, store: Dict[str, Tensor]) -> Any:
    if isinstance(tree, dict):
        if set(tree) == {"__tensor__"}:
            return store[tree["__tensor__"]]
        return {k: _restore_tensors(v, store) for k, v in tree.items()}
    if isinstance(tree, list):
        return [_restore_tensors(v, store) for v in tree]
    return tree


def save_checkpoint(state: TrainState, path: str) -> None:
    tensors: Dict[str, Tensor] = {}
    for name, t in state.model.state_dict().items():
        tensors[f"model.{name}"] = t
    optim_skeleton = _flatten_tensors(state.optimizer.state_dict(), "optim", tensors)
    tensors["rng.sampler"] = state.generator.get_state()

    entries: List[Dict[str, Any]] = []
    blobs: List[bytes] = []
    offset = 0
    for name in sorted(tensors):
        blob, dtype_name, shape = encode_tensor(tensors[name])
        entries.append({"name": name, "dtype": dtype_name, "shape": shape, "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)

    manifest = {
        "format_version": FORMAT_VERSION,
        "step": state.step,
        "config": state.config.to_dict(),
        "optimizer": optim_skeleton,
        "tensors": entries,
    }
    payload = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        for blob in blobs:
            fh.write(blob)


def read_manifest(path: str) -> Dict[str, Any]:
    p = Path(path)
    if not p.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(p, "rb") as fh:
        head = fh.read(len(MAGIC))
        if head != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint archive (bad magic)")
        size_raw = fh.read(8)
        if len(size_raw) != 8:
            raise CheckpointError(f"{path}: truncated header")
        (size,) = struct.unpack("<Q", size_raw)
        raw = fh.read(size)
        if len(raw) != size:
            raise CheckpointError(f"{path}: truncated manifest")
        try:
            manifest = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt manifest ({exc})") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {manifest.get('format_version')} is not supported (expected {FORMAT_VERSION})"
        )
    for key in ("step", "config", "tensors"):
        if key not in manifest:
            raise CheckpointError(f"{path}: corrupt manifest (missing {key!r})")
    return manifest


def _read_tensors(path: str, manifest: Dict[str, Any]) -> Dict[str, Tensor]:
    with open(path, "rb") as fh:
        fh.seek(len(MAGIC))
        (size,) = struct.unpack("<Q", fh.read(8))
        payload_start = len(MAGIC) + 8 + size
        store: Dict[str, Tensor] = {}
        for entry in manifest["tensors"]:
            fh.seek(payload_start + entry["offset"])
            blob = fh.read(entry["nbytes"])
            if len(blob) != entry["nbytes"]:
                raise CheckpointError(f"{path}: truncated payload for tensor {entry['name']!r}")
            store[entry["name"]] = decode_tensor(blob, entry["dtype"], entry["shape"])
    return store


def load_checkpoint(path: str) -> TrainState:
    manifest = read_manifest(path)
    store = _read_tensors(path, manifest)
    cfg = RunConfig.from_dict(manifest["config"])
    model = build_model(cfg)
    model_sd = {name[len("model.") :]: t for name, t in store.items() if name.startswith("model.")}
    model.load_state_dict(model_sd, strict=True)
    optimizer = make_optimizer(model, cfg)
    optim_sd = _restore_tensors(manifest["optimizer"], store)
    optimizer.load_state_dict(optim_sd)
    generator = torch.Generator()
    generator.set_state(store["rng.sampler"])
    perceptual = get_perceptual(cfg.loss.perceptual)
    if cfg.dtype == "float64":
        perceptual.double()
    return TrainState(
        model=model,
        optimizer=optimizer,
        generator=generator,
        perceptual=perceptual,
        config=cfg,
        step=int(manifest["step"]),
    )
