"""Parameter containers and the attention / windowing primitives."""
from __future__ import annotations

import math

import numpy as np

from emkit.errors import ShapeError
from emkit.tensor import ops
from emkit.tensor.core import Tensor, resolve_dtype


class ParamInit:
    """Deterministic initialiser writing named tensors into a dict."""

    def __init__(self, seed: int, dtype="f64"):
        self.rng = np.random.Generator(np.random.PCG64(seed))
        self.dtype = resolve_dtype(dtype)
        self.params: dict[str, Tensor] = {}

    def _put(self, name, arr):
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        self.params[name] = Tensor(arr, dtype=self.dtype, requires_grad=True, name=name)

    def linear(self, name, fan_in, fan_out, bias=True):
        a = 1.0 / math.sqrt(fan_in)
        self._put(f"{name}.w", self.rng.uniform(-a, a, size=(fan_in, fan_out)))
        if bias:
            self._put(f"{name}.b", np.zeros(fan_out))

    def norm(self, name, dim):
        self._put(f"{name}.g", np.ones(dim))
        self._put(f"{name}.b", np.zeros(dim))

    def array(self, name, arr):
        self._put(name, np.asarray(arr, dtype=np.float64))

    def uniform(self, name, shape, scale):
        self._put(name, self.rng.uniform(-scale, scale, size=shape))


def linear(x: Tensor, params: dict, name: str) -> Tensor:
    return ops.linear(x, params[f"{name}.w"], params.get(f"{name}.b"))


def norm(x: Tensor, params: dict, name: str) -> Tensor:
    return ops.layer_norm(x, params[f"{name}.g"], params[f"{name}.b"])


def _split_heads(x: Tensor, heads: int, axes) -> Tensor:
    B, T, C = x.shape
    return ops.transpose(ops.reshape(x, (B, T, heads, C // heads)), axes)


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int, return_weights: bool = False):
    """Multi-head softmax(QK^T / sqrt(d)) V without projections.

    q: [B, Tq, C], k/v: [B, Tk, C]. Weights come back as [B, heads, Tq, Tk].
    """
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise ShapeError("attention expects [B, T, C] operands")
    B, Tq, C = q.shape
    if k.shape != v.shape or k.shape[0] != B or k.shape[2] != C:
        raise ShapeError(f"incompatible q/k/v shapes {q.shape}, {k.shape}, {v.shape}")
    if C % heads:
        raise ShapeError(f"channels {C} not divisible by heads {heads}")
    d = C // heads
    qh = _split_heads(q, heads, (0, 2, 1, 3))
    kh = _split_heads(k, heads, (0, 2, 3, 1))
    vh = _split_heads(v, heads, (0, 2, 1, 3))
    probs = ops.softmax(ops.scale(ops.matmul(qh, kh), 1.0 / math.sqrt(d)), axis=-1)
    out = ops.matmul(probs, vh)
    out = ops.reshape(ops.transpose(out, (0, 2, 1, 3)), (B, Tq, C))
    return (out, probs) if return_weights else out


def mha(q: Tensor, k: Tensor, v: Tensor, heads: int, w_o: Tensor | None = None,
        b_o: Tensor | None = None) -> Tensor:
    """Scaled dot-product attention per head, heads concatenated, then W_o."""
    out = attention(q, k, v, heads)
    if w_o is not None:
        out = ops.linear(out, w_o, b_o)
    return out


def window_partition(x: Tensor, wh: int, ww: int) -> Tensor:
    """[B, H, W, C] -> [B * nW, wh * ww, C], windows in row-major order."""
    B, H, W, C = x.shape
    if H % wh or W % ww:
        raise ShapeError(f"window ({wh},{ww}) does not tile grid ({H},{W})")
    t = ops.reshape(x, (B, H // wh, wh, W // ww, ww, C))
    t = ops.transpose(t, (0, 1, 3, 2, 4, 5))
    return ops.reshape(t, (B * (H // wh) * (W // ww), wh * ww, C))


def window_merge(windows: Tensor, B: int, H: int, W: int, wh: int, ww: int) -> Tensor:
    if H % wh or W % ww:
        raise ShapeError(f"window ({wh},{ww}) does not tile grid ({H},{W})")
    C = windows.shape[-1]
    t = ops.reshape(windows, (B, H // wh, W // ww, wh, ww, C))
    t = ops.transpose(t, (0, 1, 3, 2, 4, 5))
    return ops.reshape(t, (B, H, W, C))
