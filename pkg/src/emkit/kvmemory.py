"""Accumulative-context KV cache with blended importance and top-k eviction.

Call order per autoregressive step: a full cache (N * L tokens) is first
pruned to (N - 1) * L tokens, the L new tokens are appended, the queries
attend over all of them, and the importance scores are refreshed from that
attention. The cache therefore grows L, 2L, ..., NL and then stays at NL.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from emkit.emformer.layers import attention
from emkit.errors import ConfigError, ContractError, ShapeError
from emkit.tensor import ops
from emkit.tensor.core import Tensor
from emkit.tensor.io import save_tensor


@dataclass(frozen=True)
class CachePolicy:
    lam: float = 0.9          # weight on the current score
    N: int = 5                # capacity in steps
    granularity: str = "token"  # or "step": score and evict whole steps
    detach: bool = False      # cut gradients through cached K/V

    def __post_init__(self):
        if not (0.0 <= self.lam <= 1.0):
            raise ConfigError(f"lambda must be in [0, 1], got {self.lam}")
        if self.N < 2:
            raise ConfigError(f"N must be >= 2, got {self.N}")
        if self.granularity not in ("token", "step"):
            raise ConfigError(f"granularity must be 'token' or 'step', got {self.granularity!r}")


@dataclass
class KVCache:
    keys: Tensor            # [B, T, C]
    values: Tensor          # [B, T, C]
    importance: np.ndarray  # [T], nonnegative
    step_tokens: int
    max_steps: int
    kept_history: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.keys.shape[1]

    @property
    def capacity(self) -> int:
        return self.step_tokens * self.max_steps

    def check(self) -> None:
        if self.keys.shape != self.values.shape:
            raise ContractError(f"keys {self.keys.shape} and values {self.values.shape} differ")
        if self.importance.shape != (self.size,):
            raise ContractError(f"importance length {self.importance.shape} != T={self.size}")
        if self.size > self.capacity:
            raise ContractError(f"cache holds {self.size} tokens, capacity {self.capacity}")
        if np.any(self.importance < 0):
            raise ContractError("negative importance")


def update_importance(old, cur, lam: float, n_recent: int = 0) -> np.ndarray:
    """lam * cur + (1 - lam) * old, except the last ``n_recent`` entries take cur as is."""
    old = np.asarray(old, dtype=np.float64)
    cur = np.asarray(cur, dtype=np.float64)
    if old.shape != cur.shape or old.ndim != 1:
        raise ShapeError(f"score vectors differ: {old.shape} vs {cur.shape}")
    out = lam * cur + (1.0 - lam) * old
    if n_recent:
        out[-n_recent:] = cur[-n_recent:]
    return out


def topk_indices(scores, k: int) -> np.ndarray:
    """Indices of the k largest scores, ascending; ties go to the lower index."""
    scores = np.asarray(scores)
    if k <= 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-scores, kind="stable")[:k]
    return np.sort(order)


def select_kept(importance, L: int, N: int, granularity: str = "token") -> np.ndarray:
    """Indices surviving a prune of a cache with T = len(importance) tokens."""
    T = len(importance)
    n_old = T - L
    if granularity == "token":
        keep_old = topk_indices(importance[:n_old], (N - 2) * L)
    else:
        per_step = np.asarray(importance[:n_old]).reshape(-1, L).mean(axis=1)
        steps = topk_indices(per_step, N - 2)
        keep_old = (steps[:, None] * L + np.arange(L)[None, :]).reshape(-1)
    return np.concatenate([keep_old, np.arange(n_old, T)]).astype(np.int64)


def prune(cache: KVCache, policy: CachePolicy) -> KVCache:
    """Evict down to (N - 1) * L tokens. Below capacity this is a no-op."""
    L, N = cache.step_tokens, policy.N
    if cache.size < N * L:
        return cache
    kept = select_kept(cache.importance, L, N, policy.granularity)
    return KVCache(
        keys=ops.take(cache.keys, kept, axis=1),
        values=ops.take(cache.values, kept, axis=1),
        importance=cache.importance[kept].copy(),
        step_tokens=L,
        max_steps=N,
        kept_history=cache.kept_history + [kept.tolist()],
    )


def attend_with_cache(q: Tensor, k_new: Tensor, v_new: Tensor, cache: KVCache | None,
                      policy: CachePolicy, heads: int = 1, proj=None):
    """Attend the L new queries over cached plus new keys/values.

    q, k_new, v_new: [B, L, C]. ``proj`` is an optional (W_o, b_o) applied to
    the attention output. Returns (out [B, L, C], updated cache).
    """
    if q.ndim != 3 or k_new.shape != q.shape or v_new.shape != q.shape:
        raise ShapeError(f"q/k/v must share shape [B, L, C], got {q.shape}, {k_new.shape}, {v_new.shape}")
    B, L, C = q.shape
    if cache is not None:
        if cache.step_tokens != L:
            raise ShapeError(f"cache expects {cache.step_tokens} tokens per step, got {L}")
        if cache.keys.shape[0] != B or cache.keys.shape[2] != C:
            raise ShapeError(f"cache holds [B={cache.keys.shape[0]}, C={cache.keys.shape[2]}], got [{B}, {C}]")
        cache = prune(cache, policy)
        keys = ops.concat([cache.keys, k_new], axis=1)
        values = ops.concat([cache.values, v_new], axis=1)
    else:
        keys, values = k_new, v_new
    out, probs = attention(q, keys, values, heads, return_weights=True)
    if proj is not None:
        out = ops.linear(out, proj[0], proj[1] if len(proj) > 1 else None)
    cur = probs.data.mean(axis=(0, 1, 2))
    if cache is None:
        imp = cur.astype(np.float64)
        history = []
    else:
        old = np.concatenate([cache.importance, np.zeros(L)])
        imp = update_importance(old, cur, policy.lam, n_recent=L)
        history = cache.kept_history
    if policy.detach:
        keys, values = keys.detach(), values.detach()
    new = KVCache(keys, values, imp, L, policy.N, history)
    new.check()
    return out, new


def dump_cache(cache: KVCache, directory) -> Path:
    """keys/values as tensor files, scores and kept-index history as text."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_tensor(d / "keys", cache.keys, dtype="float64")
    save_tensor(d / "values", cache.values, dtype="float64")
    with open(d / "importance.txt", "w") as fh:
        fh.write("\n".join(f"{s:.17g}" for s in cache.importance) + "\n")
    with open(d / "kept_history.json", "w") as fh:
        json.dump({"step_tokens": cache.step_tokens, "max_steps": cache.max_steps,
                   "kept": cache.kept_history}, fh)
    return d
