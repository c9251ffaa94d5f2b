"""Mappings between the sparse radar network and tessellation cells.

``RadarToCellMap`` interpolates radar measurements onto cells with k-nearest
inverse-distance weights; ``CellToRadarMap`` is the observation operator that
averages cell values over each radar's measurement disk, weighted by overlap area.
Both are plain row-stochastic matrices, so applying them is linear.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tessellation import Tessellation

ZERO_DISTANCE_KM = 1e-6
DEFAULT_RADIUS_KM = 35.0


class ObservationMapError(ValueError):
    pass


@dataclass(frozen=True)
class SensorNetwork:
    ids: tuple
    locations: np.ndarray  # (M, 2) km
    radius: np.ndarray  # (M,) km

    def __post_init__(self):
        if len(self.ids) != len(self.locations) or len(self.ids) != len(self.radius):
            raise ValueError("ids, locations and radius must have the same length")
        if np.any(np.asarray(self.radius) <= 0):
            raise ValueError("measurement radii must be positive")

    @classmethod
    def from_locations(cls, locations, radius_km: float = DEFAULT_RADIUS_KM, ids=None):
        locations = np.asarray(locations, dtype=float).reshape(-1, 2)
        if ids is None:
            ids = tuple(f"R{m:03d}" for m in range(len(locations)))
        return cls(tuple(ids), locations, np.full(len(locations), float(radius_km)))

    def __len__(self):
        return len(self.ids)

    def subset(self, index: Sequence[int]) -> "SensorNetwork":
        index = np.asarray(index, dtype=int)
        return SensorNetwork(tuple(self.ids[i] for i in index), self.locations[index],
                             self.radius[index])


@dataclass
class SensorFrame:
    """Radar measurements; arrays may carry leading time axes.

    ``velocity`` holds NaN where no velocity was measured even if the density is valid.
    """

    density: np.ndarray  # (..., M)
    velocity: np.ndarray  # (..., M, 2)
    valid: np.ndarray  # (..., M) bool

    def velocity_valid(self) -> np.ndarray:
        return self.valid & np.all(np.isfinite(self.velocity), axis=-1)

    def take(self, index) -> "SensorFrame":
        """Select along the radar axis."""
        return SensorFrame(self.density[..., index], self.velocity[..., index, :],
                           self.valid[..., index])

    def __getitem__(self, t) -> "SensorFrame":
        return SensorFrame(self.density[t], self.velocity[t], self.valid[t])


@dataclass
class PseudoFrame:
    """Cell-level pseudo-measurements produced by ``interpolate_to_cells``."""

    density: np.ndarray  # (..., N)
    velocity: np.ndarray  # (..., N, 2)
    missing: np.ndarray  # (..., N) bool, density had no valid contributor


@dataclass(frozen=True)
class RadarToCellMap:
    index: np.ndarray  # (N, k) radar indices
    weights: np.ndarray  # (N, k)
    n_radars: int

    @property
    def k(self) -> int:
        return self.index.shape[1]

    def dense(self) -> np.ndarray:
        W = np.zeros((len(self.index), self.n_radars))
        rows = np.repeat(np.arange(len(self.index)), self.k)
        np.add.at(W, (rows, self.index.ravel()), self.weights.ravel())
        return W


@dataclass(frozen=True)
class CellToRadarMap:
    matrix: np.ndarray  # (M, N), rows sum to one

    def entries(self, m: int) -> list[tuple[int, float]]:
        cols = np.flatnonzero(self.matrix[m])
        return [(int(c), float(self.matrix[m, c])) for c in cols]


def idw_weights(distances: np.ndarray) -> np.ndarray:
    """Inverse-distance weights normalised to one; a (near) zero distance takes all weight."""
    distances = np.asarray(distances, dtype=float)
    hit = np.flatnonzero(distances < ZERO_DISTANCE_KM)
    if len(hit):
        w = np.zeros_like(distances)
        w[hit[0]] = 1.0
        return w
    w = 1.0 / distances
    return w / w.sum()


def build_radar_to_cell(tess: Tessellation, net: SensorNetwork, k: int = 10) -> RadarToCellMap:
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(net) == 0:
        raise ObservationMapError("empty sensor network")
    k = min(k, len(net))
    d = np.linalg.norm(tess.sites[:, None, :] - net.locations[None, :, :], axis=-1)
    # stable sort: ties at equal distance resolve to the lower radar index
    order = np.argsort(d, axis=1, kind="stable")[:, :k]
    weights = np.vstack([idw_weights(d[n, order[n]]) for n in range(len(d))])
    return RadarToCellMap(order, weights, len(net))


def interpolate_to_cells(rmap: RadarToCellMap, frame: SensorFrame) -> PseudoFrame:
    """Weighted average of valid radar values per cell, renormalised over valid contributors."""
    W = rmap.dense()
    valid = frame.valid.astype(float)
    rho = np.where(frame.valid, frame.density, 0.0)
    den = valid @ W.T
    missing = den <= 0
    safe = np.where(missing, 1.0, den)
    density = np.where(missing, 0.0, (rho @ W.T) / safe)

    vvalid = frame.velocity_valid()
    vel = np.where(vvalid[..., None], frame.velocity, 0.0)
    vden = vvalid.astype(float) @ W.T
    vmiss = vden <= 0
    vsafe = np.where(vmiss, 1.0, vden)
    velocity = np.stack([(vel[..., 0] @ W.T) / vsafe, (vel[..., 1] @ W.T) / vsafe], axis=-1)
    velocity = np.where(vmiss[..., None], 0.0, velocity)
    return PseudoFrame(density, velocity, missing)


# -- disk / polygon overlap --------------------------------------------------------------

def _segment_circle_params(p, q, r):
    d = q - p
    a = d @ d
    b = 2.0 * (p @ d)
    c = p @ p - r * r
    disc = b * b - 4 * a * c
    ts = [0.0]
    if disc > 0 and a > 0:
        sq = math.sqrt(disc)
        for t in sorted(((-b - sq) / (2 * a), (-b + sq) / (2 * a))):
            if 0.0 < t < 1.0:
                ts.append(t)
    ts.append(1.0)
    return ts


def _tri_circle_area(p, q, r):
    """Signed area of circle(0, r) intersected with triangle (0, p, q)."""
    ts = _segment_circle_params(p, q, r)
    area = 0.0
    for t0, t1 in zip(ts[:-1], ts[1:]):
        a = p + t0 * (q - p)
        b = p + t1 * (q - p)
        mid = 0.5 * (a + b)
        cross = a[0] * b[1] - a[1] * b[0]
        if mid @ mid <= r * r:
            area += 0.5 * cross
        else:
            area += 0.5 * r * r * math.atan2(cross, a @ b)
    return area


def disk_polygon_overlap(center, radius: float, poly: np.ndarray) -> float:
    """Exact area of a disk intersected with a simple polygon (counter-clockwise)."""
    rel = np.asarray(poly, dtype=float) - np.asarray(center, dtype=float)
    n = len(rel)
    return float(sum(_tri_circle_area(rel[k], rel[(k + 1) % n], radius) for k in range(n)))


def points_in_convex(points, poly):
    inside = np.ones(len(points), dtype=bool)
    n = len(poly)
    for k in range(n):
        a, b = poly[k], poly[(k + 1) % n]
        e = b - a
        inside &= (e[0] * (points[:, 1] - a[1]) - e[1] * (points[:, 0] - a[0])) >= 0
    return inside


def disk_overlaps_mc(center, radius, polys, n_samples=100_000, seed=0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    rad = radius * np.sqrt(rng.random(n_samples))
    ang = 2 * np.pi * rng.random(n_samples)
    pts = np.column_stack([center[0] + rad * np.cos(ang), center[1] + rad * np.sin(ang)])
    area = math.pi * radius * radius
    return np.array([points_in_convex(pts, p).mean() * area for p in polys])


def build_cell_to_radar(tess: Tessellation, net: SensorNetwork, method: str = "exact",
                        n_samples: int = 100_000, seed: int = 0) -> CellToRadarMap:
    M, N = len(net), tess.n_cells
    O = np.zeros((M, N))
    reach = np.array([np.linalg.norm(c - tess.centers[n], axis=1).max()
                      for n, c in enumerate(tess.cells)])
    for m in range(M):
        x, r = net.locations[m], float(net.radius[m])
        near = np.flatnonzero(np.linalg.norm(tess.centers - x, axis=1) <= reach + r)
        if method == "exact":
            ov = np.array([disk_polygon_overlap(x, r, tess.cells[n]) for n in near])
        elif method == "mc":
            ov = disk_overlaps_mc(x, r, [tess.cells[n] for n in near], n_samples, seed + m)
        else:
            raise ValueError(f"unknown overlap method {method!r}")
        ov = np.clip(ov, 0.0, None)
        ov[ov < 1e-12 * math.pi * r * r] = 0.0
        total = ov.sum()
        if total <= 0:
            raise ObservationMapError(f"radar {net.ids[m]} does not overlap any cell")
        O[m, near] = ov / total
    return CellToRadarMap(O)


def observe(cmap: CellToRadarMap, values: np.ndarray) -> np.ndarray:
    """Map cell values (..., N) to radar values (..., M)."""
    return np.asarray(values) @ cmap.matrix.T


def observe_frame(cmap: CellToRadarMap, density, velocity) -> SensorFrame:
    rho = observe(cmap, density)
    vel = np.stack([observe(cmap, velocity[..., 0]), observe(cmap, velocity[..., 1])], axis=-1)
    return SensorFrame(rho, vel, np.ones(rho.shape, dtype=bool))


# -- files -------------------------------------------------------------------------------

NETWORK_HEADER = ["radar_id", "x_km", "y_km", "radius_km"]
SENSOR_HEADER = ["time", "radar_id", "density", "vx", "vy", "valid"]


def write_network_csv(path, net: SensorNetwork) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(NETWORK_HEADER)
        for rid, (x, y), r in zip(net.ids, net.locations, net.radius):
            w.writerow([rid, repr(float(x)), repr(float(y)), repr(float(r))])


def read_network_csv(path) -> SensorNetwork:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or list(rows[0].keys()) != NETWORK_HEADER:
        raise ObservationMapError(f"{path}: expected header {','.join(NETWORK_HEADER)}")
    return SensorNetwork(tuple(r["radar_id"] for r in rows),
                         np.array([[float(r["x_km"]), float(r["y_km"])] for r in rows]),
                         np.array([float(r["radius_km"]) for r in rows]))


def format_time(t: np.datetime64) -> str:
    return str(np.datetime64(t, "h")) + ":00:00Z"


def parse_time(s: str) -> np.datetime64:
    return np.datetime64(s.rstrip("Z"), "h")


def write_sensor_csv(path, times, ids, frames: SensorFrame) -> None:
    """``frames`` arrays have shape (T, M[, 2]). Missing velocities are written empty."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SENSOR_HEADER)
        for t, ts in enumerate(times):
            stamp = format_time(ts)
            for m, rid in enumerate(ids):
                vx, vy = frames.velocity[t, m]
                w.writerow([stamp, rid, repr(float(frames.density[t, m])),
                            "" if not np.isfinite(vx) else repr(float(vx)),
                            "" if not np.isfinite(vy) else repr(float(vy)),
                            int(bool(frames.valid[t, m]))])


def read_sensor_csv(path, ids: Sequence[str] | None = None):
    """Return ``(times, ids, SensorFrame)`` with a dense (T, M) layout."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != SENSOR_HEADER:
            raise ObservationMapError(f"{path}: expected header {','.join(SENSOR_HEADER)}")
        rows = list(reader)
    times = sorted({parse_time(r["time"]) for r in rows})
    if ids is None:
        ids = sorted({r["radar_id"] for r in rows})
    tix = {t: n for n, t in enumerate(times)}
    mix = {m: n for n, m in enumerate(ids)}
    T, M = len(times), len(ids)
    rho = np.zeros((T, M))
    vel = np.full((T, M, 2), np.nan)
    valid = np.zeros((T, M), dtype=bool)
    for r in rows:
        if r["radar_id"] not in mix:
            continue
        t, m = tix[parse_time(r["time"])], mix[r["radar_id"]]
        rho[t, m] = float(r["density"])
        vel[t, m] = [float(r["vx"]) if r["vx"] else np.nan, float(r["vy"]) if r["vy"] else np.nan]
        valid[t, m] = r["valid"] == "1"
    return np.array(times, dtype="datetime64[h]"), tuple(ids), SensorFrame(rho, vel, valid)
