"""Minimum-pressure cyclone tracker on lat-lon grids."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field

import numpy as np

from emkit.errors import ContractError, ShapeError
from emkit.metrics import haversine


@dataclass(frozen=True)
class TrackerConfig:
    radius_km: float = 278.0
    p_max: float = 101200.0
    wind_min: float = 10.2
    disp_max: float = 400.0


@dataclass
class Fix:
    step: int
    lat: float
    lon: float
    msl: float
    wind: float
    displacement_km: float = 0.0


@dataclass
class Track:
    fixes: list = field(default_factory=list)
    stop_reason: str = ""

    def __len__(self):
        return len(self.fixes)

    def latlon(self) -> np.ndarray:
        return np.array([(f.lat, f.lon) for f in self.fixes], dtype=np.float64)

    def write_csv(self, path) -> None:
        cols = ["step", "lat", "lon", "msl", "wind", "displacement_km"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
            w.writeheader()
            for f in self.fixes:
                w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in asdict(f).items()})


def _inside(lats, lons, lat, lon) -> bool:
    dlat = abs(lats[1] - lats[0]) if lats.size > 1 else 180.0
    if not (lats.min() - dlat / 2 <= lat <= lats.max() + dlat / 2):
        return False
    dlon = abs(lons[1] - lons[0]) if lons.size > 1 else 360.0
    if lons.size * dlon >= 360.0 - 1e-9:
        return True  # global in longitude
    lon = lon % 360.0
    lo, hi = lons.min() % 360.0 - dlon / 2, lons.max() % 360.0 + dlon / 2
    return lo <= lon <= hi


def _get(snapshot, key):
    for k in (key, key.upper()):
        if k in snapshot:
            return np.asarray(snapshot[k], dtype=np.float64)
    raise ContractError(f"snapshot lacks {key!r}")


def track_cyclone(fields, lats, lons, init_lat: float, init_lon: float,
                  cfg: TrackerConfig | None = None) -> Track:
    """Follow the MSL minimum through ``fields`` (a sequence of dicts with
    ``msl``, ``u10`` and ``v10`` arrays shaped [lat, lon]).

    Fix 0 is the initial position with the MSL of the nearest cell. Every
    later fix is the MSL argmin inside the search disk around the previous
    fix (lowest flat index on ties). Max wind is taken over the same disk.
    Tracking stops when the centre pressure exceeds ``p_max``, the max wind
    drops below ``wind_min`` or the centre jumps more than ``disp_max``.
    """
    cfg = cfg or TrackerConfig()
    lats = np.asarray(lats, dtype=np.float64)
    lons = np.asarray(lons, dtype=np.float64)
    if not _inside(lats, lons, init_lat, init_lon):
        raise ContractError(f"initial position ({init_lat}, {init_lon}) lies outside the grid")
    LAT, LON = np.meshgrid(lats, lons, indexing="ij")
    flat_lat, flat_lon = LAT.ravel(), LON.ravel()
    track = Track()

    def disk(lat, lon):
        d = haversine(lat, lon, flat_lat, flat_lon)
        return d, d <= cfg.radius_km

    def wind_max(snap, mask):
        u, v = _get(snap, "u10").ravel(), _get(snap, "v10").ravel()
        if u.size != flat_lat.size or v.size != flat_lat.size:
            raise ShapeError("wind field does not match grid")
        return float(np.sqrt(u * u + v * v)[mask].max()) if mask.any() else 0.0

    fields = list(fields)
    if not fields:
        return track
    msl0 = _get(fields[0], "msl").ravel()
    if msl0.size != flat_lat.size:
        raise ShapeError(f"MSL field has {msl0.size} cells, grid has {flat_lat.size}")
    d0, mask0 = disk(init_lat, init_lon)
    nearest = int(np.argmin(d0))
    fix = Fix(0, float(init_lat), float(init_lon), float(msl0[nearest]), wind_max(fields[0], mask0))
    track.fixes.append(fix)
    if fix.msl > cfg.p_max:
        track.stop_reason = "pressure"
        return track
    if fix.wind < cfg.wind_min:
        track.stop_reason = "wind"
        return track
    for step in range(1, len(fields)):
        msl = _get(fields[step], "msl").ravel()
        _, mask = disk(fix.lat, fix.lon)
        cand = np.nonzero(mask)[0]
        if cand.size == 0:
            track.stop_reason = "empty-disk"
            break
        idx = int(cand[np.argmin(msl[cand])])  # first minimum = lowest flat index
        lat, lon = float(flat_lat[idx]), float(flat_lon[idx])
        _, cmask = disk(lat, lon)
        wind = wind_max(fields[step], cmask)
        disp = float(haversine(fix.lat, fix.lon, lat, lon))
        if msl[idx] > cfg.p_max:
            track.stop_reason = "pressure"
            break
        if wind < cfg.wind_min:
            track.stop_reason = "wind"
            break
        if disp > cfg.disp_max:
            track.stop_reason = "displacement"
            break
        fix = Fix(step, lat, lon, float(msl[idx]), wind, disp)
        track.fixes.append(fix)
    else:
        track.stop_reason = "end"
    return track


def synthetic_depression(lats, lons, center_lat, center_lon, depth=3000.0, width_km=300.0,
                         background=101500.0, wind_peak=30.0):
    """Gaussian MSL low with a matching cyclonic wind ring; for tests and demos."""
    LAT, LON = np.meshgrid(lats, lons, indexing="ij")
    d = haversine(center_lat, center_lon, LAT, LON)
    msl = background - depth * np.exp(-(d / width_km) ** 2)
    speed = wind_peak * (d / width_km) * np.exp(0.5 - 0.5 * (d / width_km) ** 2)
    ang = np.arctan2(LAT - center_lat, LON - center_lon)
    return {"msl": msl, "u10": -speed * np.sin(ang), "v10": speed * np.cos(ang)}
