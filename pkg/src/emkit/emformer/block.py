"""EMFormer block: QKV projection, fused multi-scale conv on the 3C grid,
global or windowed attention, then post-norm residual MLP."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from emkit import kvmemory
from emkit.emformer.layers import ParamInit, attention, linear, norm, window_merge, window_partition
from emkit.errors import ConfigError, ShapeError
from emkit.multiconv.ops import multiconv
from emkit.tensor import ops
from emkit.tensor.core import Tensor

WINDOWS = ((4, 4), (2, 8), (8, 2))


@dataclass(frozen=True)
class BlockConfig:
    dim: int
    heads: int
    attn_mode: str = "global"
    window: tuple = (4, 4)
    mlp_ratio: int = 2
    use_conv: bool = True

    def __post_init__(self):
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.attn_mode not in ("global", "windowed"):
            raise ConfigError(f"attn_mode must be global or windowed, got {self.attn_mode!r}")
        if self.window[0] * self.window[1] != 16:
            raise ConfigError(f"window {self.window} must cover 16 tokens")


def init_block(init: ParamInit, prefix: str, dim: int, mlp_ratio: int = 2,
               kernel_scale: float = 0.01) -> None:
    c3 = 3 * dim
    init.linear(f"{prefix}.qkv", dim, c3)
    init.array(f"{prefix}.k1", np.eye(c3)[:, :, None, None])
    init.uniform(f"{prefix}.k3", (c3, c3, 3, 3), kernel_scale)
    init.uniform(f"{prefix}.k5", (c3, c3, 5, 5), kernel_scale)
    init.linear(f"{prefix}.proj", dim, dim)
    init.norm(f"{prefix}.ln1", dim)
    init.linear(f"{prefix}.mlp1", dim, mlp_ratio * dim)
    init.linear(f"{prefix}.mlp2", mlp_ratio * dim, dim)
    init.norm(f"{prefix}.ln2", dim)


def _grid_check(x: Tensor, grid) -> None:
    if x.ndim != 3:
        raise ShapeError(f"block input must be [B, T, C], got {x.shape}")
    if grid[0] * grid[1] != x.shape[1]:
        raise ShapeError(f"{x.shape[1]} tokens do not form a {grid[0]}x{grid[1]} grid")


def qkv_conv(x: Tensor, params: dict, prefix: str, grid, use_conv: bool = True):
    """Project to 3C, run the multi-scale conv on the token grid, split Q/K/V."""
    B, T, C = x.shape
    h, w = grid
    z = linear(x, params, f"{prefix}.qkv")
    if use_conv:
        z = ops.transpose(ops.reshape(z, (B, h, w, 3 * C)), (0, 3, 1, 2))
        z = multiconv(z, params[f"{prefix}.k1"], params[f"{prefix}.k3"], params[f"{prefix}.k5"])
        z = ops.reshape(ops.transpose(z, (0, 2, 3, 1)), (B, T, 3 * C))
    return (ops.slice_axis(z, 0, C, axis=2), ops.slice_axis(z, C, 2 * C, axis=2),
            ops.slice_axis(z, 2 * C, 3 * C, axis=2))


def emformer_block(x: Tensor, params: dict, cfg: BlockConfig, grid, prefix: str = "block",
                   caches: dict | None = None, policy: kvmemory.CachePolicy | None = None) -> Tensor:
    """One block on tokens laid out row-major over ``grid`` = (h, w).

    When ``caches`` is given and the block is global, keys/values are read
    from and written back to ``caches[prefix]``.
    """
    _grid_check(x, grid)
    B, T, C = x.shape
    h, w = grid
    q, k, v = qkv_conv(x, params, prefix, grid, cfg.use_conv)
    if cfg.attn_mode == "windowed":
        wh, ww = cfg.window
        parts = [window_partition(ops.reshape(t, (B, h, w, C)), wh, ww) for t in (q, k, v)]
        a = attention(*parts, cfg.heads)
        a = ops.reshape(window_merge(a, B, h, w, wh, ww), (B, T, C))
        a = linear(a, params, f"{prefix}.proj")
    elif caches is not None:
        pol = policy or kvmemory.CachePolicy()
        a, caches[prefix] = kvmemory.attend_with_cache(
            q, k, v, caches.get(prefix), pol, cfg.heads,
            proj=(params[f"{prefix}.proj.w"], params[f"{prefix}.proj.b"]))
    else:
        a = linear(attention(q, k, v, cfg.heads), params, f"{prefix}.proj")
    a = ops.add(norm(a, params, f"{prefix}.ln1"), x)
    m = linear(ops.gelu(linear(a, params, f"{prefix}.mlp1")), params, f"{prefix}.mlp2")
    return ops.add(norm(m, params, f"{prefix}.ln2"), a)


def init_cross(init: ParamInit, prefix: str, dim: int) -> None:
    for n in ("q", "k", "v", "proj"):
        init.linear(f"{prefix}.{n}", dim, dim)
    init.norm(f"{prefix}.ln", dim)


def cross_attention(query: Tensor, context: Tensor, params: dict, prefix: str, heads: int) -> Tensor:
    """LN(MHA(Q = query, K = V = context)) + query."""
    a = attention(linear(query, params, f"{prefix}.q"), linear(context, params, f"{prefix}.k"),
                  linear(context, params, f"{prefix}.v"), heads)
    a = linear(a, params, f"{prefix}.proj")
    return ops.add(norm(a, params, f"{prefix}.ln"), query)
