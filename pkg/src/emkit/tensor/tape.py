"""Single-writer reverse-mode tape.

Ops executed while a tape is active are appended in order; ``gradient``
replays them strictly backwards. Only first derivatives are supported.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from emkit.errors import ContractError, ShapeError
from emkit.tensor.core import Tensor

_ACTIVE: list["Tape"] = []


@dataclass
class Record:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


def current_tape() -> "Tape | None":
    return _ACTIVE[-1] if _ACTIVE else None


class Tape:
    def __init__(self):
        self.records: list[Record] = []
        self._produced: set[int] = set()
        self.replay_order: list[int] = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def tracks(self, t) -> bool:
        return isinstance(t, Tensor) and (t.requires_grad or id(t) in self._produced)

    def record(self, op: str, inputs: Sequence, output: Tensor, backward) -> None:
        self.records.append(Record(op, tuple(inputs), output, backward))
        self._produced.add(id(output))

    def gradient(self, target: Tensor, sources: Sequence[Tensor], seed: np.ndarray | None = None):
        """Gradients of ``target`` with respect to each of ``sources``.

        ``target`` must be a single-element tensor unless ``seed`` (the upstream
        gradient, same shape as ``target``) is given. Sources that do not
        influence the target receive zeros.
        """
        if seed is None:
            if target.size != 1:
                raise ContractError(f"gradient target must be scalar, got shape {target.shape}")
            seed = np.ones(target.shape, dtype=target.dtype)
        grads: dict[int, np.ndarray] = {id(target): np.asarray(seed, dtype=target.dtype)}
        self.replay_order = []
        for idx in range(len(self.records) - 1, -1, -1):
            rec = self.records[idx]
            g = grads.get(id(rec.output))
            if g is None:
                continue
            self.replay_order.append(idx)
            in_grads = rec.backward(g)
            for inp, gi in zip(rec.inputs, in_grads):
                if gi is None or not self.tracks(inp):
                    continue
                if gi.shape != inp.shape:
                    raise ShapeError(f"{rec.op}: gradient shape {gi.shape} != input shape {inp.shape}")
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        out = []
        for s in sources:
            g = grads.get(id(s))
            out.append(np.zeros(s.shape, dtype=s.dtype) if g is None else g)
        return out


class no_record:
    """Suspend all active tapes inside the block (inference, finite differences)."""

    def __enter__(self):
        self._saved = list(_ACTIVE)
        _ACTIVE.clear()
        return self

    def __exit__(self, *exc):
        _ACTIVE.extend(self._saved)
        return False


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative disagreement between tape and central-difference gradients.

    Error per coordinate is ``|analytic - fd| / max(1, |fd|)``; the maximum
    over all coordinates is returned. Run in float64 for meaningful results.
    """
    if not (1e-6 <= eps <= 1e-2):
        raise ContractError(f"eps must lie in [1e-6, 1e-2], got {eps}")
    base = np.array(x.data, dtype=np.float64)
    leaf = Tensor(base, requires_grad=True)
    with Tape() as tape:
        y = f(leaf)
        if y.size != 1:
            raise ContractError(f"grad_check needs a scalar function, got output shape {y.shape}")
        (analytic,) = tape.gradient(y, [leaf])
    analytic = analytic.reshape(-1)
    flat = base.reshape(-1)
    worst = 0.0
    with no_record():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(Tensor(base)).item()
            flat[i] = orig - eps
            fm = f(Tensor(base)).item()
            flat[i] = orig
            fd = (fp - fm) / (2.0 * eps)
            worst = max(worst, abs(analytic[i] - fd) / max(1.0, abs(fd)))
    return worst
