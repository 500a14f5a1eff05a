"""Single-step pretraining and multi-step (plain / accumulative) finetuning."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from emkit.emformer.model import ModelConfig, encode_decode, init_model, load_checkpoint, save_checkpoint
from emkit.errors import ConfigError, ContractError, TrainingDiverged
from emkit.harness.data import Dataset, NormStats
from emkit.harness.optim import AdamW, cosine_lr
from emkit.kvmemory import CachePolicy
from emkit.loss import blend, latitude_weights, loss_additive, loss_l2, loss_total
from emkit.metrics import rmse
from emkit.tensor import ops
from emkit.tensor.core import Tensor
from emkit.tensor.tape import Tape, no_record

STRATEGIES = ("none", "plain", "accumulative")
LOSSES = ("blend", "l2", "additive")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    lr: float = 2e-4
    lr_min: float = 1e-7
    weight_decay: float = 0.0
    loss: str = "blend"
    swapped: bool = False
    loss_lr: float = 1e-2     # Adam step for theta and w
    # finetuning
    strategy: str = "none"
    K: int = 10
    updates: int = 40
    policy: CachePolicy | None = None
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if isinstance(self.policy, dict):
            self.policy = CachePolicy(**self.policy)
        if self.strategy == "accumulative" and self.policy is None:
            raise ConfigError("accumulative finetuning needs a CachePolicy")
        if self.epochs < 0 or self.batch_size < 1 or self.updates < 0:
            raise ConfigError("epochs/updates must be >= 0 and batch_size >= 1")

    @classmethod
    def finetune_defaults(cls, strategy: str, **kw) -> "TrainConfig":
        base = dict(strategy=strategy, lr=5e-5, K=10,
                    policy=CachePolicy(lam=0.9, N=5) if strategy == "accumulative" else None)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["policy"] = None if self.policy is None else asdict(self.policy)
        return d


@dataclass
class Forecaster:
    """Model parameters plus everything needed to run them on physical fields."""
    params: dict
    config: ModelConfig
    stats: NormStats
    theta: float = -math.pi / 2 + 1e-3
    w: np.ndarray = None

    def __post_init__(self):
        if self.w is None:
            self.w = np.zeros(self.config.variables)
        self.w = np.asarray(self.w, dtype=np.float64)

    @classmethod
    def create(cls, config: ModelConfig, stats: NormStats, seed: int = 0, theta0=None):
        f = cls(init_model(config, seed), config, stats)
        if theta0 is not None:
            f.theta = float(theta0)
        return f

    def copy(self) -> "Forecaster":
        return replace(self, params=dict(self.params), w=self.w.copy())

    def step_normalized(self, z: Tensor, caches=None, policy=None) -> Tensor:
        return encode_decode(z, self.params, self.config, caches, policy)

    def predict(self, field: np.ndarray) -> np.ndarray:
        """One physical-space step for [V, H, W] or [B, V, H, W] input."""
        single = field.ndim == 3
        z = self.stats.normalize(field[None] if single else field)
        with no_record():
            out = self.stats.denormalize(self.step_normalized(Tensor(z)).data)
        return out[0] if single else out


def objective(kind: str, pred: Tensor, truth: Tensor, theta: Tensor, w: Tensor, weights,
              swapped: bool = False) -> Tensor:
    if kind == "blend":
        return loss_total(pred, truth, w, theta, weights, swapped)
    if kind == "additive":
        return loss_additive(pred, truth, w, weights)
    return loss_l2(pred, truth)


@dataclass
class TrainResult:
    model: Forecaster
    curve: list = field(default_factory=list)
    cache_sizes: list = field(default_factory=list)  # per update, per unroll step (accumulative)


def _diverged(where: str, value, model: Forecaster, **extra):
    diag = {"where": where, "loss": float(value), "theta": model.theta, "w": model.w.tolist()}
    diag.update(extra)
    return TrainingDiverged(f"non-finite loss during {where}", diagnostics=diag)


def heldout_rmse(model: Forecaster, ds: Dataset, max_pairs: int = 32) -> float:
    """Mean over pairs and variables of the one-step latitude-weighted RMSE in normalized units."""
    n = min(len(ds) - 1, max_pairs)
    z = _normalized(model, ds)
    with no_record():
        pred = model.step_normalized(Tensor(z[:n])).data
    return float(rmse(pred, z[1:n + 1], latitude_weights(ds.lats)).mean())


def _normalized(model: Forecaster, ds: Dataset) -> np.ndarray:
    return np.stack([model.stats.normalize(f) for f in ds.fields])


def pretrain(model: Forecaster, ds: Dataset, cfg: TrainConfig, heldout: Dataset | None = None) -> TrainResult:
    """One-step-ahead training of all parameters plus (theta, w)."""
    if len(ds) < 2:
        raise ContractError("pretraining needs at least 2 snapshots")
    model = model.copy()
    if cfg.epochs == 0:
        return TrainResult(model)
    z = _normalized(model, ds)
    weights = latitude_weights(ds.lats)
    n_pairs = len(ds) - 1
    per_epoch = math.ceil(n_pairs / cfg.batch_size)
    total = per_epoch * cfg.epochs
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    opt = AdamW(cfg.lr, weight_decay=cfg.weight_decay)
    loss_opt = AdamW(cfg.loss_lr)
    learn = cfg.loss != "l2"
    names = list(model.params)
    curve = []
    it = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n_pairs)
        losses = []
        for b in range(per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            x, y = Tensor(z[idx]), Tensor(z[idx + 1])
            theta = Tensor(np.array([model.theta]), requires_grad=learn)
            w = Tensor(model.w, requires_grad=learn)
            with Tape() as tape:
                pred = model.step_normalized(x)
                loss = objective(cfg.loss, pred, y, theta, w, weights, cfg.swapped)
            value = loss.item()
            if not math.isfinite(value):
                raise _diverged("pretrain", value, model, epoch=epoch, batch=b)
            srcs = [model.params[n] for n in names] + ([theta, w] if learn else [])
            grads = tape.gradient(loss, srcs)
            model.params = opt.step(model.params, dict(zip(names, grads)),
                                    cosine_lr(it, total, cfg.lr, cfg.lr_min))
            if learn:
                lp = loss_opt.step({"theta": theta, "w": w}, {"theta": grads[-2], "w": grads[-1]})
                model.theta = float(min(max(lp["theta"].data[0], -math.pi / 2), math.pi / 2))
                model.w = np.array(lp["w"].data)
            losses.append(value)
            it += 1
        alpha, beta = blend(model.theta, cfg.swapped)
        row = {"epoch": epoch, "loss": float(np.mean(losses)), "theta": model.theta,
               "sin_theta": math.sin(model.theta), "alpha": alpha, "beta": beta,
               "w_mean": float(model.w.mean())}
        if heldout is not None:
            row["heldout_rmse"] = heldout_rmse(model, heldout)
        curve.append(row)
    return TrainResult(model, curve)


def unroll_loss(model: Forecaster, z: np.ndarray, starts, cfg: TrainConfig, weights, sizes=None) -> Tensor:
    """Mean objective over a K-step autoregressive unroll from ``starts``."""
    starts = np.asarray(starts)
    x = Tensor(z[starts])
    caches = {} if cfg.strategy == "accumulative" else None
    theta = Tensor(np.array([model.theta]))
    w = Tensor(model.w)
    total = None
    for k in range(1, cfg.K + 1):
        x = model.step_normalized(x, caches, cfg.policy)
        lk = objective(cfg.loss, x, Tensor(z[starts + k]), theta, w, weights, cfg.swapped)
        total = lk if total is None else ops.add(total, lk)
        if sizes is not None and caches is not None:
            sizes.append(max(c.size for c in caches.values()))
    return ops.scale(total, 1.0 / cfg.K)


def finetune(model: Forecaster, ds: Dataset, cfg: TrainConfig) -> TrainResult:
    """K-step rollout finetuning; ``none`` hands the model back untouched."""
    if cfg.strategy == "none":
        return TrainResult(model)
    if cfg.K < 2:
        raise ContractError(f"finetuning needs K >= 2, got {cfg.K}")
    if len(ds) < cfg.K + 1:
        raise ContractError(f"dataset of {len(ds)} steps is too short for K={cfg.K}")
    model = model.copy()
    z = _normalized(model, ds)
    weights = latitude_weights(ds.lats)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    opt = AdamW(cfg.lr, weight_decay=cfg.weight_decay)
    names = list(model.params)
    n_starts = len(ds) - cfg.K
    curve, all_sizes = [], []
    for u in range(cfg.updates):
        starts = rng.integers(0, n_starts, size=cfg.batch_size)
        sizes: list = []
        with Tape() as tape:
            loss = unroll_loss(model, z, starts, cfg, weights, sizes)
        value = loss.item()
        if not math.isfinite(value):
            raise _diverged("finetune", value, model, update=u)
        grads = tape.gradient(loss, [model.params[n] for n in names])
        model.params = opt.step(model.params, dict(zip(names, grads)),
                                cosine_lr(u, cfg.updates, cfg.lr, cfg.lr_min))
        curve.append({"update": u, "loss": value})
        all_sizes.append(sizes)
    return TrainResult(model, curve, all_sizes)


def save_forecaster(directory, model: Forecaster, extra: dict | None = None):
    meta = {"stats": model.stats.to_dict(), "theta": model.theta, "w": model.w.tolist()}
    meta.update(extra or {})
    return save_checkpoint(directory, model.params, model.config, meta)


def load_forecaster(directory) -> Forecaster:
    ck = load_checkpoint(directory)
    ex = ck.extra
    if "stats" not in ex:
        raise ContractError(f"{directory} is a bare model checkpoint without normalisation stats")
    return Forecaster(ck.params, ck.config, NormStats.from_dict(ex["stats"]), ex.get("theta", 0.0),
                      np.asarray(ex.get("w", np.zeros(ck.config.variables))))
