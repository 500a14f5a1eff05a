"""Autoregressive rollouts with per-lead latitude-weighted scores."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from emkit.errors import ContractError, ShapeError, UndefinedMetricError
from emkit.harness.train import Forecaster
from emkit.kvmemory import CachePolicy
from emkit.loss import lat_centers, latitude_weights
from emkit.metrics import acc, rmse
from emkit.tensor.core import Tensor
from emkit.tensor.tape import no_record


@dataclass
class RolloutResult:
    preds: np.ndarray                 # [steps, B, V, H, W] physical units
    rmse: list = field(default_factory=list)       # per lead: mean over batch and variables, normalized units
    rmse_var: list = field(default_factory=list)   # per lead: [V], physical units
    acc: list = field(default_factory=list)        # per lead: mean over batch and variables
    cache_sizes: list = field(default_factory=list)

    @property
    def steps(self) -> int:
        return self.preds.shape[0]


def rollout(model: Forecaster, init: np.ndarray, steps: int, with_cache: bool = False,
            truth: np.ndarray | None = None, lats=None, policy: CachePolicy | None = None) -> RolloutResult:
    """Feed each prediction back as the next input.

    ``init`` is [V, H, W] or [B, V, H, W] in physical units; ``truth``, when
    given, is [steps, ...] aligned with leads 1..steps.
    """
    if steps < 1:
        raise ContractError(f"steps must be >= 1, got {steps}")
    x0 = np.asarray(init, dtype=np.float64)
    x0 = x0[None] if x0.ndim == 3 else x0
    if truth is not None:
        truth = np.asarray(truth, dtype=np.float64)
        truth = truth[:, None] if truth.ndim == 4 else truth
        if truth.shape[0] < steps or truth.shape[1:] != x0.shape:
            raise ShapeError(f"truth {truth.shape} does not cover {steps} steps of {x0.shape}")
    weights = latitude_weights(lats if lats is not None else lat_centers(x0.shape[-2]))
    st = model.stats
    pol = policy or CachePolicy()
    caches = {} if with_cache else None
    z = Tensor(np.stack([st.normalize(f) for f in x0]))
    preds = np.empty((steps,) + x0.shape)
    res = RolloutResult(preds)
    with no_record():
        for k in range(steps):
            z = model.step_normalized(z, caches, pol)
            preds[k] = np.stack([st.denormalize(f) for f in z.data])
            if caches:
                res.cache_sizes.append(max(c.size for c in caches.values()))
            if truth is None:
                continue
            zt = np.stack([st.normalize(f) for f in truth[k]])
            res.rmse.append(float(rmse(z.data, zt, weights).mean()))
            res.rmse_var.append(rmse(preds[k], truth[k], weights).mean(axis=0))
            try:
                res.acc.append(float(acc(preds[k], truth[k], weights).mean()))
            except UndefinedMetricError:
                res.acc.append(None)
    return res


def persistence(init: np.ndarray, truth: np.ndarray, stats, lats) -> list:
    """Normalized RMSE per lead of the forecast that repeats ``init``."""
    weights = latitude_weights(lats)
    x0 = np.asarray(init)
    x0 = x0[None] if x0.ndim == 3 else x0
    z0 = np.stack([stats.normalize(f) for f in x0])
    out = []
    for tk in truth:
        tk = tk[None] if tk.ndim == 3 else tk
        zt = np.stack([stats.normalize(f) for f in tk])
        out.append(float(rmse(z0, zt, weights).mean()))
    return out

