"""Multi-scale convolution: plain three-branch, fused composite, and the
branch-independent backward that shares one 5x5 gradient pass."""
from __future__ import annotations

import numpy as np

from emkit.errors import ConfigError, ShapeError
from emkit.multiconv import backend as _bk
from emkit.tensor.core import Tensor
from emkit.tensor.tape import current_tape

SIZES = (1, 3, 5)


def _check_kernel(k: Tensor, r: int, name: str):
    if k.ndim != 4 or k.shape[2] != r or k.shape[3] != r:
        raise ShapeError(f"{name} must have shape [Cout, Cin, {r}, {r}], got {k.shape}")


class ConvKernelSet:
    """Branch kernels k1 [O,C,1,1], k3 [O,C,3,3], k5 [O,C,5,5].

    The composite is built on first access and dropped whenever a branch is
    reassigned (tensors are immutable, so reassignment is the only change).
    """

    def __init__(self, k1: Tensor, k3: Tensor, k5: Tensor):
        self._k = {}
        self._composite = None
        for r, k in zip(SIZES, (k1, k3, k5)):
            self._set(r, k)
        self._check_channels()

    def _set(self, r, k):
        if not isinstance(k, Tensor):
            k = Tensor(k)
        _check_kernel(k, r, f"k{r}")
        self._k[r] = k
        self._composite = None

    def _check_channels(self):
        shapes = {r: k.shape[:2] for r, k in self._k.items()}
        if len(set(shapes.values())) != 1:
            raise ShapeError(f"branch kernels disagree on (Cout, Cin): {shapes}")

    def _branch_setter(r):
        def fset(self, k):
            self._set(r, k)
            self._check_channels()
        return fset

    k1 = property(lambda self: self._k[1], _branch_setter(1))
    k3 = property(lambda self: self._k[3], _branch_setter(3))
    k5 = property(lambda self: self._k[5], _branch_setter(5))
    del _branch_setter

    @property
    def cout(self) -> int:
        return self._k[1].shape[0]

    @property
    def cin(self) -> int:
        return self._k[1].shape[1]

    @property
    def dtype(self):
        return self._k[5].dtype

    @property
    def composite(self) -> Tensor:
        if self._composite is None:
            self._composite = compose_kernels(self)
        return self._composite

    def branches(self):
        return self._k[1], self._k[3], self._k[5]

    @classmethod
    def seeded(cls, cout: int, cin: int, seed: int, dtype="f64", scale: float = 1.0):
        from emkit.tensor.core import seeded_tensor
        ks = []
        for i, r in enumerate(SIZES):
            t = seeded_tensor([cout, cin, r, r], seed * 3 + i, dtype=dtype)
            ks.append(Tensor(t.data * scale, dtype=t.dtype) if scale != 1.0 else t)
        return cls(*ks)


def compose_kernels(kset: ConvKernelSet) -> Tensor:
    """Center-aligned sum k5 + pad(k3) + pad(k1)."""
    k1, k3, k5 = kset.branches()
    if not (k1.shape[:2] == k3.shape[:2] == k5.shape[:2]):
        raise ShapeError("branch kernels disagree on (Cout, Cin)")
    comp = np.array(k5.data)
    comp[:, :, 1:4, 1:4] += k3.data
    comp[:, :, 2:3, 2:3] += k1.data
    return Tensor._wrap(comp)


def _check_input(x: Tensor, cin: int | None = None):
    if x.ndim != 4:
        raise ShapeError(f"conv input must be [B, Cin, H, W], got {x.shape}")
    if cin is not None and x.shape[1] != cin:
        raise ShapeError(f"input has {x.shape[1]} channels, kernels expect {cin}")


def conv2d(x: Tensor, kernel: Tensor, backend=None, workers: int = 1) -> Tensor:
    """Stride-1 zero same-padded correlation, no bias. Kernel sizes 1, 3, 5."""
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ShapeError(f"kernel must be [Cout, Cin, r, r], got {kernel.shape}")
    r = kernel.shape[2]
    if r not in SIZES:
        raise ConfigError(f"kernel size {r} not supported (only 1, 3, 5)")
    _check_input(x, kernel.shape[1])
    if x.dtype != kernel.dtype:
        raise ShapeError(f"dtype mismatch: input {x.dtype}, kernel {kernel.dtype}")
    return Tensor._wrap(_bk.conv_forward(x.data, kernel.data, backend, workers))


def multi_scale_forward(x: Tensor, kset: ConvKernelSet, mode: str = "fused",
                        backend=None, workers: int = 1) -> Tensor:
    _check_input(x, kset.cin)
    if mode == "fused":
        return conv2d(x, kset.composite, backend, workers)
    if mode == "plain":
        k1, k3, k5 = kset.branches()
        out = conv2d(x, k1, backend, workers).data
        out = out + conv2d(x, k3, backend, workers).data
        out = out + conv2d(x, k5, backend, workers).data
        return Tensor._wrap(out)
    raise ConfigError(f"mode must be 'plain' or 'fused', got {mode!r}")


def multi_scale_backward(x: Tensor, grad_out: Tensor, kset: ConvKernelSet, mode: str = "fused",
                         backend=None, workers: int = 1):
    """Returns (gradK1, gradK3, gradK5, grad_input).

    fused: one 5x5 weight-gradient pass whose center 3x3 and 1x1 windows are
    exactly the smaller branches' gradients (zero padding makes every
    smaller-branch window a sub-window of the 5x5 one), and one input-gradient
    pass through the composite. plain: three independent per-branch passes.
    """
    _check_input(x, kset.cin)
    B, _, H, W = x.shape
    want = (B, kset.cout, H, W)
    if grad_out.shape != want:
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output shape {want}")
    xd, g = x.data, grad_out.data
    if mode == "fused":
        g5 = _bk.conv_weight_grad(xd, g, 5, backend, workers)
        g3 = np.ascontiguousarray(g5[:, :, 1:4, 1:4])
        g1 = np.ascontiguousarray(g5[:, :, 2:3, 2:3])
        gx = _bk.conv_input_grad(g, kset.composite.data, backend, workers)
    elif mode == "plain":
        g1, g3, g5 = (_bk.conv_weight_grad(xd, g, r, backend, workers) for r in SIZES)
        gx = None
        for k in kset.branches():
            part = _bk.conv_input_grad(g, k.data, backend, workers)
            gx = part if gx is None else gx + part
    else:
        raise ConfigError(f"mode must be 'plain' or 'fused', got {mode!r}")
    return tuple(Tensor._wrap(a) for a in (g1, g3, g5, gx))


def multiconv(x: Tensor, k1: Tensor, k3: Tensor, k5: Tensor, backend=None, workers: int = 1) -> Tensor:
    """Taped fused multi-scale conv; gradients flow to x and all three branches."""
    kset = ConvKernelSet(k1, k3, k5)
    out = multi_scale_forward(x, kset, "fused", backend, workers)
    tape = current_tape()
    if tape is not None and any(tape.tracks(t) for t in (x, k1, k3, k5)):
        def backward(g):
            g1, g3, g5, gx = multi_scale_backward(x, Tensor._wrap(g), kset, "fused", backend, workers)
            return gx.data, g1.data, g3.data, g5.data
        tape.record("multiconv", (x, k1, k3, k5), out, backward)
    return out
