"""Immutable dense tensors and seeded construction."""
from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from emkit.errors import NonFiniteError, ShapeError

_DTYPES = {
    "f32": np.float32,
    "float32": np.float32,
    "f64": np.float64,
    "float64": np.float64,
}


def resolve_dtype(dtype) -> np.dtype:
    """Map ``"f32"``/``"f64"`` (or a numpy float dtype) to a numpy dtype."""
    if dtype is None:
        return np.dtype(np.float64)
    if isinstance(dtype, str):
        try:
            return np.dtype(_DTYPES[dtype])
        except KeyError:
            raise ShapeError(f"unsupported dtype {dtype!r}; use f32 or f64") from None
    dt = np.dtype(dtype)
    if dt not in (np.float32, np.float64):
        raise ShapeError(f"unsupported dtype {dt}; use float32 or float64")
    return dt


class Tensor:
    """Row-major float array that cannot be modified after construction.

    ``requires_grad`` marks a leaf the active :class:`~emkit.tensor.tape.Tape`
    should differentiate with respect to.
    """

    __slots__ = ("_data", "requires_grad", "name")

    def __init__(self, data, dtype=None, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data._data
        if dtype is None and isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            dt = data.dtype
        else:
            dt = resolve_dtype(dtype)
        arr = np.array(data, dtype=dt, order="C", copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor contains NaN or Inf")
        arr.flags.writeable = False
        self._data = arr
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        # Fast path for op results: no copy, no finiteness scan.
        t = cls.__new__(cls)
        if not isinstance(arr, np.ndarray):
            arr = np.asarray(arr)  # numpy scalars from 0-d reductions
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        t._data = arr
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple:
        return self._data.shape

    @property
    def dtype(self) -> np.dtype:
        return self._data.dtype

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def item(self) -> float:
        if self._data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self._data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self._data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self._data, dtype=resolve_dtype(dtype))

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self):
        return self.shape[0]

    # Arithmetic forwards to the differentiable ops.
    def __add__(self, other):
        from emkit.tensor import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from emkit.tensor import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from emkit.tensor import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from emkit.tensor import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from emkit.tensor import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from emkit.tensor import ops
        return ops.matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, np.ndarray) and x.dtype in (np.float32, np.float64):
        return Tensor._wrap(np.array(x, copy=True))
    return Tensor(x, dtype=dtype)


def validate(t: Tensor) -> Tensor:
    """Raise :class:`NonFiniteError` unless every entry of ``t`` is finite."""
    if not np.isfinite(t.data).all():
        raise NonFiniteError(f"non-finite entries in tensor of shape {t.shape}")
    if t.data.size != int(np.prod(t.shape, dtype=np.int64)):
        raise ShapeError("data length does not match shape")
    return t


def seeded_tensor(shape: Sequence[int] | Iterable[int], seed: int, dist: str = "uniform",
                  dtype="f64") -> Tensor:
    """Deterministic random tensor.

    ``dist`` is ``"uniform"`` (on [-1, 1]) or ``"normal"`` (standard). Values
    are drawn in float64 from a PCG64 stream and cast, so a given
    ``(shape, seed, dist)`` produces the same bytes on every run.
    """
    shape = tuple(int(d) for d in shape)
    if not shape or any(d <= 0 for d in shape):
        raise ShapeError(f"all dims must be >= 1, got {shape}")
    rng = np.random.Generator(np.random.PCG64(seed))
    if dist in ("uniform", "uniform[-1,1]"):
        arr = rng.uniform(-1.0, 1.0, size=shape)
    elif dist in ("normal", "normal(0,1)"):
        arr = rng.standard_normal(size=shape)
    else:
        raise ShapeError(f"unknown distribution {dist!r}")
    return Tensor(arr, dtype=resolve_dtype(dtype))
