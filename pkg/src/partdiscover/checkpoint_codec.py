"""Tensor <-> little-endian bytes for the checkpoint archive."""

from __future__ import annotations

from typing import List, Tuple

import numpy as np
import torch
from torch import Tensor

from .core import CheckpointError

_DTYPES = {
    torch.float32: "float32",
    torch.float64: "float64",
    torch.int64: "int64",
    torch.int32: "int32",
    torch.uint8: "uint8",
    torch.bool: "bool",
}
_NP_DTYPES = {
    "float32": np.dtype("<f4"),
    "float64": np.dtype("<f8"),
    "int64": np.dtype("<i8"),
    "int32": np.dtype("<i4"),
    "uint8": np.dtype("u1"),
    "bool": np.dtype("?"),
}


def encode_tensor(t: Tensor) -> Tuple[bytes, str, List[int]]:
    if t.dtype not in _DTYPES:
        raise CheckpointError(f"unsupported tensor dtype {t.dtype}")
    name = _DTYPES[t.dtype]
    arr = t.detach().cpu().contiguous().numpy().astype(_NP_DTYPES[name], copy=False)
    return arr.tobytes(), name, list(t.shape)


def decode_tensor(blob: bytes, dtype_name: str, shape: List[int]) -> Tensor:
    if dtype_name not in _NP_DTYPES:
        raise CheckpointError(f"unsupported tensor dtype {dtype_name!r} in archive")
    np_dtype = _NP_DTYPES[dtype_name]
    count = int(np.prod(shape)) if shape else 1
    if len(blob) != count * np_dtype.itemsize:
        raise CheckpointError(f"tensor payload has {len(blob)} bytes, expected {count * np_dtype.itemsize}")
    arr = np.frombuffer(blob, dtype=np_dtype, count=count).reshape(shape)
    return torch.from_numpy(arr.copy())
