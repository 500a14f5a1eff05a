"""Randomised fused-vs-plain agreement sweep."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from emkit.multiconv.ops import ConvKernelSet, multi_scale_backward, multi_scale_forward
from emkit.tensor.core import Tensor


@dataclass
class SweepResult:
    trials: int
    dtype: str
    forward: float = 0.0
    grads: dict = field(default_factory=lambda: {"gk1": 0.0, "gk3": 0.0, "gk5": 0.0, "ginput": 0.0})
    grads_abs: dict = field(default_factory=lambda: {"gk1": 0.0, "gk3": 0.0, "gk5": 0.0, "ginput": 0.0})
    configs: list = field(default_factory=list)

    def lines(self) -> list[str]:
        out = [f"trials={self.trials} dtype={self.dtype}", f"forward_maxdiff={self.forward:.3e}"]
        out += [f"{k}_maxdiff={self.grads_abs[k]:.3e} rel={v:.3e}" for k, v in self.grads.items()]
        return out


def random_config(rng, max_b=4, max_c=16, max_hw=32):
    return dict(B=int(rng.integers(1, max_b + 1)), Cin=int(rng.integers(1, max_c + 1)),
                Cout=int(rng.integers(1, max_c + 1)), H=int(rng.integers(1, max_hw + 1)),
                W=int(rng.integers(1, max_hw + 1)))


def sweep(trials: int = 100, seed: int = 0, dtype: str = "f64", grads: bool = True,
          max_b=4, max_c=16, max_hw=32, backend=None) -> SweepResult:
    """Max |fused - plain| over random shapes for outputs and (optionally) all gradients.

    Gradient diffs are relative to the largest magnitude of the plain result
    when that exceeds 1, absolute otherwise.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    np_dt = np.float64 if dtype in ("f64", "float64") else np.float32
    res = SweepResult(trials, dtype)
    for _ in range(trials):
        c = random_config(rng, max_b, max_c, max_hw)
        x = Tensor(rng.normal(size=(c["B"], c["Cin"], c["H"], c["W"])).astype(np_dt))
        ks = ConvKernelSet(*(Tensor((rng.normal(size=(c["Cout"], c["Cin"], r, r)) / r).astype(np_dt))
                             for r in (1, 3, 5)))
        fused = multi_scale_forward(x, ks, "fused", backend)
        plain = multi_scale_forward(x, ks, "plain", backend)
        res.forward = max(res.forward, float(np.max(np.abs(fused.data.astype(np.float64)
                                                           - plain.data.astype(np.float64)))))
        if grads:
            g = Tensor(rng.normal(size=fused.shape).astype(np_dt))
            gf = multi_scale_backward(x, g, ks, "fused", backend)
            gp = multi_scale_backward(x, g, ks, "plain", backend)
            for name, a, b in zip(("gk1", "gk3", "gk5", "ginput"), gf, gp):
                a64, b64 = a.data.astype(np.float64), b.data.astype(np.float64)
                d = float(np.max(np.abs(a64 - b64)))
                res.grads_abs[name] = max(res.grads_abs[name], d)
                res.grads[name] = max(res.grads[name], d / max(1.0, float(np.max(np.abs(b64)))))
        res.configs.append(c)
    return res
