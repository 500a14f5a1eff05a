"""On-disk tensor format.

A tensor ``name`` is stored as two files:

``name.bin``
    Flat row-major payload, little-endian IEEE-754. No header, no padding;
    the byte length is ``prod(shape) * itemsize``.
``name.json``
    ``{"shape": [...], "dtype": "float32" | "float64", "names": [...]?}``.
    ``names`` optionally labels the leading axis (e.g. variable names).

float32 is the default payload type; checkpoints that must round-trip a
float64 model bit-exactly write ``"dtype": "float64"``.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from emkit.errors import ShapeError
from emkit.tensor.core import Tensor

_WIRE = {"float32": "<f4", "float64": "<f8"}


def _stem(path) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix in (".bin", ".json") else p


def save_tensor(path, tensor, dtype: str = "float32", names=None, extra: dict | None = None) -> Path:
    """Write ``tensor`` to ``path.bin`` + ``path.json``; returns the stem path."""
    if dtype not in _WIRE:
        raise ShapeError(f"unsupported wire dtype {dtype!r}")
    arr = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    payload = np.ascontiguousarray(arr, dtype=_WIRE[dtype])
    with open(str(stem) + ".bin", "wb") as fh:
        fh.write(payload.tobytes(order="C"))
    meta = {"shape": [int(d) for d in arr.shape], "dtype": dtype}
    if names is not None:
        meta["names"] = list(names)
    if extra:
        meta.update(extra)
    with open(str(stem) + ".json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return stem


def read_meta(path) -> dict:
    with open(str(_stem(path)) + ".json") as fh:
        return json.load(fh)


def load_array(path) -> tuple[np.ndarray, dict]:
    stem = _stem(path)
    meta = read_meta(stem)
    dtype = meta.get("dtype", "float32")
    if dtype not in _WIRE:
        raise ShapeError(f"unsupported wire dtype {dtype!r} in {stem}.json")
    shape = tuple(meta["shape"])
    expected = int(np.prod(shape, dtype=np.int64)) * np.dtype(_WIRE[dtype]).itemsize
    actual = os.path.getsize(str(stem) + ".bin")
    if actual != expected:
        raise ShapeError(f"{stem}.bin holds {actual} bytes, metadata implies {expected}")
    arr = np.fromfile(str(stem) + ".bin", dtype=_WIRE[dtype]).reshape(shape)
    return arr.astype(np.dtype(dtype)), meta


def load_tensor(path, dtype=None) -> Tensor:
    arr, _ = load_array(path)
    return Tensor(arr, dtype=dtype)
