"""Kernel backend selection, batch drivers and the counting mode.

The compiled extension is used when importable; set ``EMKIT_BACKEND`` to
``python`` to force the numpy fallback or ``compiled`` to fail loudly when
the extension is missing. Drivers split the batch across an optional thread
pool. Each batch item writes its own kernel-gradient partial and partials
are summed in batch order afterwards, so the result does not depend on the
worker count.
"""
from __future__ import annotations

import contextlib
import importlib
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from emkit.errors import ConfigError

_BACKENDS = {}


def _load(name: str):
    if name not in _BACKENDS:
        mod = "_ckernels" if name == "compiled" else "_pykernels"
        _BACKENDS[name] = importlib.import_module(f"emkit.multiconv.{mod}")
    return _BACKENDS[name]


def available_backends() -> list[str]:
    names = ["python"]
    try:
        _load("compiled")
        names.insert(0, "compiled")
    except ImportError:
        pass
    return names


def _select(choice: str):
    if choice not in ("auto", "compiled", "python"):
        raise ConfigError(f"EMKIT_BACKEND must be auto, compiled or python, got {choice!r}")
    if choice == "python":
        return _load("python")
    try:
        return _load("compiled")
    except ImportError:
        if choice == "compiled":
            raise
        return _load("python")


_default = _select(os.environ.get("EMKIT_BACKEND", "auto"))


def default_backend() -> str:
    return _default.NAME


def set_default_backend(name: str) -> None:
    global _default
    _default = _select(name)


def get_backend(name: str | None):
    return _default if name is None else _select(name)


# counting mode

@dataclass
class OpCount:
    macs: int = 0
    input_passes: int = 0
    gemm_blocks: int = 0

    def per_item(self, batch: int) -> float:
        return self.macs / batch


_COUNTERS: list[OpCount] = []


@contextlib.contextmanager
def count_macs():
    """Tally multiply-adds executed by the conv kernels inside the block.

    Counts are derived from the tap blocks each kernel reports as executed
    (one O x C x H x W block per tap per sample), not from formulas.
    """
    counter = OpCount()
    _COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _COUNTERS.remove(counter)


def _tally(blocks: int, per_block: int) -> None:
    for c in _COUNTERS:
        c.macs += blocks * per_block
        c.gemm_blocks += blocks
        c.input_passes += 1


# drivers

def _chunks(n: int, workers: int):
    workers = max(1, min(workers, n))
    step = -(-n // workers)
    return [(s, min(n, s + step)) for s in range(0, n, step)]


def _run(fn, n: int, workers: int) -> int:
    if workers <= 1 or n <= 1:
        return fn(0, n)
    parts = _chunks(n, workers)
    with ThreadPoolExecutor(max_workers=len(parts)) as pool:
        return sum(pool.map(lambda se: fn(*se), parts))


def pad_input(x: np.ndarray, p: int) -> np.ndarray:
    B, C, H, W = x.shape
    xp = np.zeros((B, C, H + 2 * p, W + 2 * p), dtype=x.dtype)
    xp[:, :, p:p + H, p:p + W] = x
    return xp


def taps_layout(kernel: np.ndarray) -> np.ndarray:
    """[O, C, r, r] -> contiguous [r, r, O, C] (one BLAS-ready matrix per tap)."""
    return np.ascontiguousarray(kernel.transpose(2, 3, 0, 1))


def _pad_grad(g: np.ndarray, p: int) -> np.ndarray:
    B, O, H, W = g.shape
    gp = np.zeros((B, O, H, W + 2 * p), dtype=g.dtype)
    gp[..., :W] = g
    return gp.reshape(B, O, H * (W + 2 * p))


def conv_forward(x: np.ndarray, kernel: np.ndarray, backend=None, workers: int = 1) -> np.ndarray:
    """Same-padded stride-1 correlation on raw arrays."""
    kb = get_backend(backend)
    B, C, H, W = x.shape
    O, r = kernel.shape[0], kernel.shape[2]
    p = r // 2
    xp = pad_input(x, p)
    taps = taps_layout(kernel)
    Wp = W + 2 * p
    out = np.zeros((B, O, H * Wp), dtype=x.dtype)
    blocks = _run(lambda s, e: kb.forward(xp[s:e], taps, H, W, out[s:e]), B, workers)
    _tally(blocks, O * C * H * W)
    return out.reshape(B, O, H, Wp)[..., :W].copy()


def conv_weight_grad(x: np.ndarray, grad_out: np.ndarray, r: int, backend=None,
                     workers: int = 1) -> np.ndarray:
    """dL/dkernel [O, C, r, r] for a same-padded conv."""
    kb = get_backend(backend)
    B, C, H, W = x.shape
    O = grad_out.shape[1]
    p = r // 2
    xp = pad_input(x, p)
    gp = _pad_grad(grad_out, p)
    partial = np.empty((B, r, r, O, C), dtype=x.dtype)
    blocks = _run(lambda s, e: kb.wgrad(xp[s:e], gp[s:e], H, W, r, partial[s:e]), B, workers)
    _tally(blocks, O * C * H * W)
    acc = partial[0].copy()
    for b in range(1, B):
        acc += partial[b]
    return np.ascontiguousarray(acc.transpose(2, 3, 0, 1))


def conv_input_grad(grad_out: np.ndarray, kernel: np.ndarray, backend=None,
                    workers: int = 1) -> np.ndarray:
    """dL/dinput [B, C, H, W]: transposed conv of grad_out with ``kernel``."""
    kb = get_backend(backend)
    B, O, H, W = grad_out.shape
    C, r = kernel.shape[1], kernel.shape[2]
    p = r // 2
    gp = _pad_grad(grad_out, p)
    taps = taps_layout(kernel)
    gx = np.zeros((B, C, H + 2 * p, W + 2 * p), dtype=grad_out.dtype)
    blocks = _run(lambda s, e: kb.igrad(gp[s:e], taps, H, W, gx[s:e]), B, workers)
    _tally(blocks, O * C * H * W)
    return gx[:, :, p:p + H, p:p + W].copy()
