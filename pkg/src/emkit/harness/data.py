"""Synthetic advection-diffusion system standing in for reanalysis data."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from emkit.errors import ConfigError, ContractError, ShapeError
from emkit.loss import lat_centers
from emkit.metrics import EvalGrid
from emkit.tensor.io import load_array, save_tensor

DEFAULT_NAMES = ("u", "t", "q", "z")
DEFAULT_AMPLITUDES = (1.0, 10.0, 0.1, 100.0)


@dataclass
class SyntheticSystem:
    """Per-variable zonal advection plus diffusion plus relaxation forcing.

    One step: shift each variable east by ``velocity[v]`` cells (linear
    interpolation for the fractional part, periodic in longitude), apply
    ``diffusion`` times the 5-point Laplacian (periodic in longitude, zero
    flux at the poles), then relax toward a fixed pattern at rate
    ``forcing``. Amplitudes scale both the initial state and the pattern.
    """
    n_lat: int = 16
    n_lon: int = 32
    names: tuple = DEFAULT_NAMES
    amplitudes: tuple = DEFAULT_AMPLITUDES
    velocity: tuple = (1.0, 2.0, -1.0, 1.0)
    diffusion: float = 0.01
    forcing: float = 0.0
    modes: int = 3
    seed: int = 0

    def __post_init__(self):
        self.names = tuple(self.names)
        self.amplitudes = tuple(float(a) for a in self.amplitudes)
        v = self.velocity
        self.velocity = tuple(float(x) for x in (v if np.ndim(v) else [v] * len(self.names)))
        if not (len(self.names) == len(self.amplitudes) == len(self.velocity)):
            raise ConfigError("names, amplitudes and velocity need one entry per variable")
        if not (0.0 <= self.diffusion <= 0.25):
            raise ConfigError(f"diffusion must lie in [0, 0.25] for stability, got {self.diffusion}")
        if not (0.0 <= self.forcing <= 1.0):
            raise ConfigError(f"forcing must lie in [0, 1], got {self.forcing}")
        if self.n_lat < 2 or self.n_lon < 2:
            raise ConfigError("grid needs at least 2x2 cells")

    @property
    def V(self) -> int:
        return len(self.names)

    def grid(self) -> EvalGrid:
        return EvalGrid.regular(self.n_lat, self.n_lon)

    def _smooth_fields(self, rng) -> np.ndarray:
        lat = np.deg2rad(lat_centers(self.n_lat))[:, None]
        lon = np.linspace(0, 2 * np.pi, self.n_lon, endpoint=False)[None, :]
        out = np.zeros((self.V, self.n_lat, self.n_lon))
        for v in range(self.V):
            for m in range(1, self.modes + 1):
                a, b, ph = rng.normal(size=3)
                out[v] += (a * np.cos(m * lon + ph) * np.cos(lat) ** m + b * np.sin(m * lat)) / m
            out[v] *= self.amplitudes[v] / max(out[v].std(), 1e-12)
        return out

    def initial_state(self) -> np.ndarray:
        return self._smooth_fields(np.random.Generator(np.random.PCG64(self.seed)))

    def pattern(self) -> np.ndarray:
        """Relaxation target, from an independent stream of the same seed."""
        if getattr(self, "_pattern", None) is None:
            self._pattern = self._smooth_fields(np.random.default_rng([self.seed, 1]))
        return self._pattern

    def step(self, x: np.ndarray) -> np.ndarray:
        out = np.empty_like(x)
        for v in range(self.V):
            c = self.velocity[v]
            n = int(np.floor(c))
            f = c - n
            xv = np.roll(x[v], n, axis=1)
            if f:
                xv = (1.0 - f) * xv + f * np.roll(x[v], n + 1, axis=1)
            out[v] = xv
        if self.diffusion:
            p = np.pad(out, ((0, 0), (1, 1), (0, 0)), mode="edge")
            lap = (p[:, :-2] + p[:, 2:] - 2 * out
                   + np.roll(out, 1, axis=2) + np.roll(out, -1, axis=2) - 2 * out)
            out = out + self.diffusion * lap
        if self.forcing:
            out = out + self.forcing * (self.pattern() - out)
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("names", "amplitudes", "velocity"):
            d[k] = list(d[k])
        return d


@dataclass
class FieldSnapshot:
    t: int
    data: np.ndarray  # [V, H, W]
    names: tuple
    grid: EvalGrid | None = None


@dataclass
class Dataset:
    fields: np.ndarray  # [T, V, H, W] float64
    names: tuple
    lats: np.ndarray
    lons: np.ndarray
    system: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.fields.ndim != 4:
            raise ShapeError(f"dataset fields must be [T, V, H, W], got {self.fields.shape}")
        if not np.all(np.isfinite(self.fields)):
            raise ContractError("dataset contains non-finite values")

    def __len__(self):
        return self.fields.shape[0]

    def grid(self, stats: "NormStats | None" = None) -> EvalGrid:
        if stats is None:
            return EvalGrid(self.lats, self.lons)
        return EvalGrid(self.lats, self.lons, mean=stats.mean, std=stats.std)

    def snapshot(self, t: int) -> FieldSnapshot:
        return FieldSnapshot(t, self.fields[t], self.names, self.grid())

    def split(self, n_train: int):
        if not (2 <= n_train <= len(self) - 2):
            raise ContractError(f"split {n_train} leaves fewer than 2 steps on one side of {len(self)}")
        cut = lambda a, b: Dataset(self.fields[a:b], self.names, self.lats, self.lons, self.system)
        return cut(0, n_train), cut(n_train, len(self))


def generate_dataset(system: SyntheticSystem, T: int) -> Dataset:
    if T < 2:
        raise ContractError(f"need T >= 2 steps, got {T}")
    x = system.initial_state()
    out = np.empty((T,) + x.shape)
    out[0] = x
    for t in range(1, T):
        x = system.step(x)
        out[t] = x
    g = system.grid()
    return Dataset(out, system.names, g.lats, g.lons, system.to_dict())


@dataclass
class NormStats:
    mean: np.ndarray  # [V]
    std: np.ndarray   # [V]

    @classmethod
    def fit(cls, ds: Dataset) -> "NormStats":
        m = ds.fields.mean(axis=(0, 2, 3))
        s = ds.fields.std(axis=(0, 2, 3))
        if np.any(s <= 0):
            raise ContractError("a variable is constant; cannot normalise")
        return cls(m, s)

    def normalize(self, x):
        return (x - self.mean[:, None, None]) / self.std[:, None, None]

    def denormalize(self, z):
        return z * self.std[:, None, None] + self.mean[:, None, None]

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def save_dataset(ds: Dataset, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_tensor(d / "fields", ds.fields, dtype="float64", names=["time", "variable", "lat", "lon"])
    meta = {"names": list(ds.names), "lats": ds.lats.tolist(), "lons": ds.lons.tolist(), "system": ds.system}
    with open(d / "dataset.json", "w") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")
    return d


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    with open(d / "dataset.json") as fh:
        meta = json.load(fh)
    return Dataset(load_array(d / "fields")[0], tuple(meta["names"]), np.asarray(meta["lats"]),
                   np.asarray(meta["lons"]), meta.get("system", {}))
