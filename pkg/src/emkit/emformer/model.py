"""Toy-scale pruning / processor / recovering encoder-decoder."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from emkit.emformer.block import (
    WINDOWS,
    BlockConfig,
    cross_attention,
    emformer_block,
    init_block,
    init_cross,
)
from emkit.emformer.layers import ParamInit, linear
from emkit.errors import ConfigError, ShapeError
from emkit.tensor import ops
from emkit.tensor.core import Tensor, resolve_dtype
from emkit.tensor.io import load_tensor, save_tensor


@dataclass
class ModelConfig:
    variables: int = 4
    height: int = 32
    width: int = 64
    patch: int = 2
    dim: int = 64
    heads: int = 4
    depth: int = 2
    blocks: int = 6
    mlp_ratio: int = 2
    windows: tuple = WINDOWS
    use_conv: bool = True
    kernel_scale: float = 0.01
    dtype: str = "f64"

    def __post_init__(self):
        self.windows = tuple(tuple(w) for w in self.windows)
        if self.dim % 2 or self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} must be even and divisible by heads {self.heads}")
        self.plan()  # raises on bad geometry

    @classmethod
    def tiny(cls, **kw) -> "ModelConfig":
        """16x32 field, C=32, one pruning level, 4 processor blocks."""
        base = dict(height=16, width=32, dim=32, depth=1, blocks=4)
        base.update(kw)
        return cls(**base)

    def plan(self):
        """Token grids per level and the axis each pruning level pairs along.

        Tokens are paired along the longer grid axis (rows on ties), so the
        token count halves at every level.
        """
        p = self.patch
        if self.height % p or self.width % p:
            raise ShapeError(f"patch {p} does not divide field {self.height}x{self.width}")
        grids = [(self.height // p, self.width // p)]
        axes = []
        for _ in range(self.depth):
            h, w = grids[-1]
            axis = 0 if h >= w else 1
            n = (h, w)[axis]
            if n % 2:
                raise ShapeError(f"grid {h}x{w} cannot be halved along axis {axis}")
            grids.append((h // 2, w) if axis == 0 else (h, w // 2))
            axes.append(axis)
        h, w = grids[-1]
        for i in range(self.blocks):
            bc = self.processor_block(i)
            if bc.attn_mode == "windowed" and (h % bc.window[0] or w % bc.window[1]):
                raise ShapeError(f"window {bc.window} does not tile processor grid {h}x{w}")
        return grids, axes

    def processor_block(self, i: int) -> BlockConfig:
        # even index: windowed, cycling through the window shapes; odd: global
        if i % 2 == 0:
            win = self.windows[(i // 2) % len(self.windows)]
            return BlockConfig(self.dim, self.heads, "windowed", win, self.mlp_ratio, self.use_conv)
        return BlockConfig(self.dim, self.heads, "global", (4, 4), self.mlp_ratio, self.use_conv)

    def level_block(self) -> BlockConfig:
        return BlockConfig(self.dim, self.heads, "global", (4, 4), self.mlp_ratio, self.use_conv)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["windows"] = [list(w) for w in self.windows]
        return d


def init_model(cfg: ModelConfig, seed: int = 0) -> dict:
    init = ParamInit(seed, cfg.dtype)
    C, V, p = cfg.dim, cfg.variables, cfg.patch
    grids, _ = cfg.plan()
    init.linear("embed", V * p * p, C)
    init.uniform("pos", (grids[0][0] * grids[0][1], C), 0.02)
    for lvl in range(cfg.depth):
        init.linear(f"down{lvl}.lin", 2 * C, C)
        init_cross(init, f"down{lvl}.cross", C)
        init_block(init, f"down{lvl}.blk", C, cfg.mlp_ratio, cfg.kernel_scale)
    for i in range(cfg.blocks):
        init_block(init, f"proc{i}", C, cfg.mlp_ratio, cfg.kernel_scale)
    for lvl in range(cfg.depth):
        init.linear(f"up{lvl}.lin", C // 2, C)
        init_cross(init, f"up{lvl}.cross", C)
        init_block(init, f"up{lvl}.blk", C, cfg.mlp_ratio, cfg.kernel_scale)
    init.uniform("head.w", (C, V * p * p), 0.1 / np.sqrt(C))
    init.array("head.b", np.zeros(V * p * p))
    return init.params


def patch_embed(field: Tensor, params: dict, patch: int) -> Tensor:
    """[B, V, H, W] -> [B, HW / p^2, C] with the positional table added."""
    B, V, H, W = field.shape
    p = patch
    if H % p or W % p:
        raise ShapeError(f"patch {p} does not divide {H}x{W}")
    t = ops.reshape(field, (B, V, H // p, p, W // p, p))
    t = ops.transpose(t, (0, 2, 4, 1, 3, 5))
    t = ops.reshape(t, (B, (H // p) * (W // p), V * p * p))
    return ops.add(linear(t, params, "embed"), params["pos"])


def unpatch(tokens: Tensor, V: int, H: int, W: int, patch: int) -> Tensor:
    B = tokens.shape[0]
    p = patch
    t = ops.reshape(tokens, (B, H // p, W // p, V, p, p))
    t = ops.transpose(t, (0, 3, 1, 4, 2, 5))
    return ops.reshape(t, (B, V, H, W))


def pair_tokens(x: Tensor, grid, axis: int) -> Tensor:
    """Concatenate adjacent token pairs along ``axis``: [B, hw, C] -> [B, hw/2, 2C]."""
    B, T, C = x.shape
    h, w = grid
    if axis == 0:
        t = ops.reshape(x, (B, h // 2, 2, w, C))
        t = ops.transpose(t, (0, 1, 3, 2, 4))
        return ops.reshape(t, (B, T // 2, 2 * C))
    return ops.reshape(x, (B, T // 2, 2 * C))


def unpair_tokens(x: Tensor, grid, axis: int) -> Tensor:
    """Inverse layout of :func:`pair_tokens`: [B, hw, C] -> [B, 2hw, C/2] on the finer grid."""
    B, T, C = x.shape
    h, w = grid
    if axis == 0:
        t = ops.reshape(x, (B, h, w, 2, C // 2))
        t = ops.transpose(t, (0, 1, 3, 2, 4))
        return ops.reshape(t, (B, 2 * T, C // 2))
    return ops.reshape(x, (B, 2 * T, C // 2))


def encode_decode(field: Tensor, params: dict, cfg: ModelConfig, caches: dict | None = None,
                  policy=None) -> Tensor:
    """One-step forecast: returns the next field, same shape as ``field``.

    The head predicts an increment added to the input. ``caches`` (a dict,
    updated in place) enables the KV memory in global processor blocks.
    """
    if field.ndim != 4 or field.shape[1:] != (cfg.variables, cfg.height, cfg.width):
        raise ShapeError(f"field shape {field.shape} does not match config "
                         f"[B, {cfg.variables}, {cfg.height}, {cfg.width}]")
    grids, axes = cfg.plan()
    lvl_cfg = cfg.level_block()
    x = patch_embed(field, params, cfg.patch)
    res = []
    for lvl in range(cfg.depth):
        res.append(x)
        d = linear(pair_tokens(x, grids[lvl], axes[lvl]), params, f"down{lvl}.lin")
        d = cross_attention(d, x, params, f"down{lvl}.cross", cfg.heads)
        x = emformer_block(d, params, lvl_cfg, grids[lvl + 1], f"down{lvl}.blk")
    for i in range(cfg.blocks):
        x = emformer_block(x, params, cfg.processor_block(i), grids[-1], f"proc{i}",
                           caches=caches, policy=policy)
    for lvl in reversed(range(cfg.depth)):
        u = linear(unpair_tokens(x, grids[lvl + 1], axes[lvl]), params, f"up{lvl}.lin")
        u = ops.add(u, res[lvl])
        u = cross_attention(u, x, params, f"up{lvl}.cross", cfg.heads)
        x = emformer_block(u, params, lvl_cfg, grids[lvl], f"up{lvl}.blk")
    inc = unpatch(linear(x, params, "head"), cfg.variables, cfg.height, cfg.width, cfg.patch)
    return ops.add(field, inc)


@dataclass
class Checkpoint:
    params: dict
    config: ModelConfig
    extra: dict = field(default_factory=dict)


def save_checkpoint(directory, params: dict, cfg: ModelConfig, extra: dict | None = None) -> Path:
    d = Path(directory)
    (d / "params").mkdir(parents=True, exist_ok=True)
    entries = []
    for name, t in params.items():
        save_tensor(d / "params" / name, t, dtype="float64")
        entries.append({"name": name, "shape": list(t.shape), "dtype": "float64"})
    manifest = {"model": cfg.to_dict(), "params": entries, "extra": extra or {}}
    with open(d / "checkpoint.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return d


def load_checkpoint(directory) -> Checkpoint:
    d = Path(directory)
    with open(d / "checkpoint.json") as fh:
        manifest = json.load(fh)
    cfg = ModelConfig(**manifest["model"])
    params = {}
    for e in manifest["params"]:
        t = load_tensor(d / "params" / e["name"])
        if list(t.shape) != e["shape"]:
            raise ShapeError(f"{e['name']}: stored shape {t.shape} != manifest {e['shape']}")
        params[e["name"]] = Tensor(t.data, dtype=resolve_dtype(cfg.dtype), requires_grad=True, name=e["name"])
    return Checkpoint(params, cfg, manifest.get("extra", {}))
