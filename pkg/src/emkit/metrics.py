"""Latitude-weighted forecast scores and great-circle distances.

Scores reduce the last two axes (lat, lon) and keep any leading axes, so a
[V, H, W] pair yields one value per variable.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from emkit.errors import ContractError, ShapeError, UndefinedMetricError
from emkit.loss import lat_centers, latitude_weights

EARTH_RADIUS_KM = 6371.0


@dataclass
class EvalGrid:
    lats: np.ndarray
    lons: np.ndarray
    mean: np.ndarray | None = None  # per-variable mu
    std: np.ndarray | None = None   # per-variable sigma

    def __post_init__(self):
        self.lats = np.asarray(self.lats, dtype=np.float64)
        self.lons = np.asarray(self.lons, dtype=np.float64)
        self.weights = latitude_weights(self.lats)
        if self.std is not None:
            self.std = np.asarray(self.std, dtype=np.float64)
            if np.any(self.std <= 0):
                raise ContractError("normalisation std must be positive")
            self.mean = np.zeros_like(self.std) if self.mean is None else np.asarray(self.mean, dtype=np.float64)

    @classmethod
    def regular(cls, n_lat: int, n_lon: int, **kw):
        return cls(lat_centers(n_lat), np.arange(n_lon) * (360.0 / n_lon), **kw)

    @property
    def spacing_km(self) -> float:
        """Meridional cell spacing."""
        if self.lats.size < 2:
            return float("nan")
        return float(np.deg2rad(abs(self.lats[1] - self.lats[0])) * EARTH_RADIUS_KM)


def _prep(pred, truth, weights):
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeError(f"pred {p.shape} and truth {t.shape} differ")
    if p.ndim < 2:
        raise ShapeError("fields need at least (lat, lon) axes")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (p.shape[-2],):
        raise ShapeError(f"{w.shape} weights for {p.shape[-2]} latitude rows")
    return p, t, w[:, None]


def _weights(grid_or_weights):
    return grid_or_weights.weights if isinstance(grid_or_weights, EvalGrid) else grid_or_weights


def rmse(pred, truth, grid):
    p, t, L = _prep(pred, truth, _weights(grid))
    return np.sqrt((L * (p - t) ** 2).mean(axis=(-2, -1)))


def _stat(v, ndim):
    v = np.asarray(v, dtype=np.float64)
    return v.reshape(v.shape + (1,) * 2) if v.ndim and ndim >= 3 else v


def nrmse(pred, truth, grid, mean=None, std=None):
    if mean is None and isinstance(grid, EvalGrid):
        mean, std = grid.mean, grid.std
    if std is None:
        raise ContractError("NRMSE needs normalisation stats")
    p = np.asarray(pred, dtype=np.float64)
    mu, sd = _stat(mean, p.ndim), _stat(std, p.ndim)
    if np.any(sd <= 0):
        raise ContractError("normalisation std must be positive")
    return rmse((p - mu) / sd, (np.asarray(truth, dtype=np.float64) - mu) / sd, grid)


def acc(pred, truth, grid, climatology=None):
    """Weighted cosine similarity of the two fields.

    Without ``climatology`` the raw fields are used; passing one scores the
    anomalies (field - climatology) instead.
    """
    p, t, L = _prep(pred, truth, _weights(grid))
    if climatology is not None:
        c = np.asarray(climatology, dtype=np.float64)
        p, t = p - c, t - c
    num = (L * p * t).sum(axis=(-2, -1))
    den = np.sqrt((L * p * p).sum(axis=(-2, -1)) * (L * t * t).sum(axis=(-2, -1)))
    if np.any(den == 0):
        raise UndefinedMetricError("ACC undefined for a zero-norm field")
    return np.clip(num / den, -1.0, 1.0)


def haversine(lat1, lon1, lat2, lon2, radius: float = EARTH_RADIUS_KM):
    """Great-circle distance in km (inputs in degrees, broadcastable).

    Central angle via atan2 of its sine and cosine, which stays accurate for
    both tiny and near-antipodal separations where the arcsin form loses digits.
    """
    p1, p2 = np.deg2rad(lat1), np.deg2rad(lat2)
    dlmb = np.deg2rad(np.asarray(lon2, dtype=np.float64) - np.asarray(lon1, dtype=np.float64))
    s1, c1, s2, c2 = np.sin(p1), np.cos(p1), np.sin(p2), np.cos(p2)
    num = np.hypot(c2 * np.sin(dlmb), c1 * s2 - s1 * c2 * np.cos(dlmb))
    den = s1 * s2 + c1 * c2 * np.cos(dlmb)
    return radius * np.arctan2(num, den)


def mde(track_pred, track_obs) -> float:
    """Mean pointwise haversine distance between aligned (lat, lon) sequences."""
    a = _latlon(track_pred)
    b = _latlon(track_obs)
    if len(a) != len(b):
        raise ContractError(f"tracks have different lengths: {len(a)} vs {len(b)}")
    if len(a) == 0:
        raise ContractError("empty tracks")
    return float(np.mean(haversine(a[:, 0], a[:, 1], b[:, 0], b[:, 1])))


def _latlon(track):
    if hasattr(track, "fixes"):
        return np.array([(f.lat, f.lon) for f in track.fixes], dtype=np.float64)
    return np.asarray(track, dtype=np.float64).reshape(-1, 2)


def score_table(pred, truth, grid: EvalGrid, names=None) -> list[dict]:
    """Per-variable RMSE / NRMSE / ACC rows for [V, H, W] fields."""
    r = np.atleast_1d(rmse(pred, truth, grid))
    n = np.atleast_1d(nrmse(pred, truth, grid)) if grid.std is not None else [None] * len(r)
    a = np.atleast_1d(acc(pred, truth, grid))
    names = names or [f"var{i}" for i in range(len(r))]
    return [{"variable": names[i], "rmse": float(r[i]),
             "nrmse": None if n[i] is None else float(n[i]), "acc": float(a[i])}
            for i in range(len(r))]
