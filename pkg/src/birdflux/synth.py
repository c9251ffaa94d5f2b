"""Synthetic migration scenarios with known velocity and source/sink fields.

A fine hexagonal grid (a quarter of the model cell diameter, quarter-hour steps)
is advanced with the upwind scheme under an analytic wind field plus a constant
migratory heading. Birds take off in a pulse after dusk, land before dawn, and
the sky is emptied two hours after dawn. Radar readings are disk averages of the
fine-grid state with Gaussian noise; the fine state aggregated to model cells is
the ground truth the learned velocities and sources are checked against.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .obsmap import (SensorFrame, SensorNetwork, build_cell_to_radar, format_time,
                     points_in_convex, read_network_csv, read_sensor_csv,
                     write_network_csv, write_sensor_csv)
from .tessellation import (Domain, Tessellation, build_hex_patch, build_hex_tessellation,
                           build_hex_torus, torus_period)

FEATURE_NAMES = ("wind_u", "wind_v", "temperature", "solar_elevation", "solar_change",
                 "is_day", "is_dusk", "is_dawn", "day_of_year")
N_LANDCOVER = 16
KM_PER_SOLAR_HOUR = 1665.0


class CFLError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    n_rings: int = 2
    cell_diameter_km: float = 137.5
    fine_factor: int = 4
    substeps: int = 4
    margin_km: float = 137.5
    n_radars: int = 12
    radar_radius_km: float = 35.0
    min_radar_spacing_km: float = 60.0
    seasons: tuple = (2013, 2014, 2015, 2019, 2020)
    season_start: str = "08-01"
    n_days: int = 8
    mean_wind_kmh: float = 12.0
    mode_wind_kmh: float = 6.0
    n_modes: int = 3
    heading_kmh: tuple = (-4.0, -18.0)
    dusk_hour: int = 19
    dawn_hour: int = 6
    takeoff_rate: float = 60.0  # birds/km^2/h during the dusk pulse
    night_landing_rate: float = 0.03  # 1/h
    dawn_landing_rate: float = 0.5  # 1/h over the three hours ending at dawn
    noise_std: float = 5.0
    velocity_noise_std: float = 2.0
    missing_rate: float = 0.02
    seed: int = 0

    @property
    def wind_norm(self) -> float:
        """Upper bound on |wind component|, used to scale the wind features to [-1, 1]."""
        return 2.0 * self.mean_wind_kmh + self.n_modes * self.mode_wind_kmh

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seasons"] = list(self.seasons)
        d["heading_kmh"] = list(self.heading_kmh)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        for key in ("seasons", "heading_kmh"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def _substream(seed: int, *keys) -> np.random.Generator:
    words = [seed] + [int(k) if not isinstance(k, str) else sum(map(ord, k)) * 7919 for k in keys]
    return np.random.default_rng(np.random.SeedSequence(words))


@dataclass
class WindField:
    """Analytic wind: slowly varying mean plus drifting Fourier modes (km/h)."""

    mean_amp: np.ndarray  # (2, 2) per component, two harmonics
    mean_period: np.ndarray  # (2, 2) hours
    mean_phase: np.ndarray  # (2, 2)
    wavevec: np.ndarray  # (n_modes, 2) rad/km
    mode_amp: np.ndarray  # (n_modes, 2)
    mode_phase: np.ndarray  # (n_modes,)
    mode_freq: np.ndarray  # (n_modes,) rad/h

    @classmethod
    def random(cls, cfg: ScenarioConfig, rng: np.random.Generator) -> "WindField":
        m = cfg.n_modes
        wavelength = rng.uniform(600.0, 1500.0, m)
        ang = rng.uniform(0, 2 * np.pi, m)
        wavevec = (2 * np.pi / wavelength)[:, None] * np.column_stack([np.cos(ang), np.sin(ang)])
        return cls(
            mean_amp=cfg.mean_wind_kmh * rng.uniform(0.3, 1.0, (2, 2)),
            mean_period=rng.uniform(60.0, 140.0, (2, 2)),
            mean_phase=rng.uniform(0, 2 * np.pi, (2, 2)),
            wavevec=wavevec,
            mode_amp=cfg.mode_wind_kmh * rng.uniform(-1.0, 1.0, (m, 2)),
            mode_phase=rng.uniform(0, 2 * np.pi, m),
            mode_freq=2 * np.pi / rng.uniform(24.0, 72.0, m),
        )

    def mean(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=float)[..., None, None]
        comp = self.mean_amp * np.sin(2 * np.pi * t / self.mean_period + self.mean_phase)
        return comp.sum(axis=-1)  # (..., 2)

    def __call__(self, xy: np.ndarray, t) -> np.ndarray:
        """Wind at points ``xy`` (P, 2) for hours ``t`` (T,) -> (T, P, 2)."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        phase = xy @ self.wavevec.T  # (P, m)
        arg = phase[None, :, :] + self.mode_phase - self.mode_freq * t[:, None, None]
        modes = np.cos(arg) @ self.mode_amp  # (T, P, 2)
        return self.mean(t)[:, None, :] + modes


@dataclass
class Scenario:
    config: ScenarioConfig
    tess: Tessellation
    fine: Tessellation
    network: SensorNetwork
    landcover: np.ndarray  # (N, 16)
    fine_owner: np.ndarray  # coarse cell of every fine cell, -1 outside the patch
    fine_landcover: np.ndarray
    observe_fine: np.ndarray  # (M, N_fine) overlap weights of radar disks on the fine grid


@dataclass
class GroundTruth:
    times: np.ndarray  # (T,) datetime64[h]
    hours: np.ndarray  # (T,) hours since season start
    fine_rho: np.ndarray  # (T, N_fine)
    fine_velocity: np.ndarray  # (T, N_fine, 2) velocity driving the step into t
    fine_source: np.ndarray  # (T, N_fine) integrated source over the step into t
    ledger: np.ndarray  # (T-1, 4) interior mass, outflow, source, reset
    rho: np.ndarray  # (T, N) coarse cell aggregates
    velocity: np.ndarray  # (T, N, 2)
    source: np.ndarray  # (T, N)
    gamma: np.ndarray  # (T, N)
    delta: np.ndarray  # (T, N)


@dataclass
class Season:
    label: int
    times: np.ndarray
    frames: SensorFrame  # unscaled, (T, M)
    env: np.ndarray  # (T, N, D)
    night: np.ndarray  # (T,) bool
    truth: GroundTruth | None = None


@dataclass
class Dataset:
    tess: Tessellation
    network: SensorNetwork
    landcover: np.ndarray
    seasons: dict
    feature_names: tuple = FEATURE_NAMES
    scenario: ScenarioConfig | None = None


# -- scenario construction ---------------------------------------------------------------

def _assign_owner(tess: Tessellation, points: np.ndarray) -> np.ndarray:
    owner = np.full(len(points), -1)
    for c, poly in enumerate(tess.cells):
        inside = points_in_convex(points, poly) & (owner < 0)
        owner[inside] = c
    return owner


def _place_radars(cfg: ScenarioConfig, tess: Tessellation, rng) -> np.ndarray:
    lo, hi = tess.centers.min(axis=0), tess.centers.max(axis=0)
    pts = []
    tries = 0
    while len(pts) < cfg.n_radars:
        tries += 1
        if tries > 100_000:
            raise ValueError("could not place radars with the requested spacing")
        p = rng.uniform(lo - cfg.cell_diameter_km / 2, hi + cfg.cell_diameter_km / 2)
        if _assign_owner(tess, p[None])[0] < 0:
            continue
        if pts and np.min(np.linalg.norm(np.asarray(pts) - p, axis=1)) < cfg.min_radar_spacing_km:
            continue
        pts.append(p)
    return np.asarray(pts)


def build_scenario(cfg: ScenarioConfig) -> Scenario:
    tess = build_hex_patch(cfg.n_rings, cfg.cell_diameter_km)
    lo = np.min([c.min(axis=0) for c in tess.cells], axis=0) - cfg.margin_km
    hi = np.max([c.max(axis=0) for c in tess.cells], axis=0) + cfg.margin_km
    fine = build_hex_tessellation(Domain(lo[0], hi[0], lo[1], hi[1]),
                                  cfg.cell_diameter_km / cfg.fine_factor)
    rng = _substream(cfg.seed, "layout")
    landcover = rng.dirichlet(np.full(N_LANDCOVER, 0.5), size=tess.n_cells)
    locations = _place_radars(cfg, tess, rng)
    net = SensorNetwork.from_locations(locations, cfg.radar_radius_km)
    owner = _assign_owner(tess, fine.centers)
    nearest = np.argmin(np.linalg.norm(fine.centers[:, None] - tess.centers[None], axis=-1), axis=1)
    fine_lc = landcover[np.where(owner >= 0, owner, nearest)]
    O = build_cell_to_radar(fine, net).matrix
    return Scenario(cfg, tess, fine, net, landcover, owner, fine_lc, O)


# -- schedule and features ---------------------------------------------------------------

def season_times(cfg: ScenarioConfig, label: int) -> np.ndarray:
    start = np.datetime64(f"{label}-{cfg.season_start}T00", "h")
    return start + np.arange(cfg.n_days * 24).astype("timedelta64[h]")


def hour_of_day(times: np.ndarray) -> np.ndarray:
    return (times.astype("datetime64[h]").astype(np.int64) % 24).astype(int)


def day_of_year(times: np.ndarray) -> np.ndarray:
    days = times.astype("datetime64[D]")
    years = days.astype("datetime64[Y]")
    doy = (days - years).astype(int) + 1
    n_days = ((years + 1).astype("datetime64[D]") - years.astype("datetime64[D]")).astype(int)
    return doy, n_days


def is_day(cfg: ScenarioConfig, hours_of_day: np.ndarray) -> np.ndarray:
    return (hours_of_day >= cfg.dawn_hour) & (hours_of_day < cfg.dusk_hour)


def solar_elevation(hours_of_day: np.ndarray, x_km: np.ndarray, x_ref: float) -> np.ndarray:
    h = hours_of_day[:, None] + (x_km[None, :] - x_ref) / KM_PER_SOLAR_HOUR
    return np.cos(2 * np.pi * (h - 12.5) / 24.0)


def temperature(cfg: ScenarioConfig, hours: np.ndarray, hod: np.ndarray, doy: np.ndarray,
                xy: np.ndarray, phase: float) -> np.ndarray:
    seasonal = 0.5 * np.sin(2 * np.pi * (doy - 110) / 365.0)
    daily = 0.3 * np.cos(2 * np.pi * (hod - 15) / 24.0)
    synoptic = 0.2 * np.sin(2 * np.pi * hours[:, None] / 90.0 + xy[None, :, 0] / 800.0 + phase)
    return seasonal[:, None] + daily[:, None] + synoptic


def gen_env_features(scenario: Scenario, tess: Tessellation, times: np.ndarray,
                     wind: WindField, temp_phase: float, t0: np.datetime64) -> np.ndarray:
    """Per cell and time: the nine features of ``FEATURE_NAMES``, each within [-1, 1]."""
    cfg = scenario.config
    hours = (times - t0).astype(int).astype(float)
    hod = hour_of_day(times)
    doy, n_days = day_of_year(times)
    xy = tess.centers
    T, N = len(times), tess.n_cells
    U = np.empty((T, N, len(FEATURE_NAMES)))
    w = wind(xy, hours)
    U[..., 0] = w[..., 0] / cfg.wind_norm
    U[..., 1] = w[..., 1] / cfg.wind_norm
    U[..., 2] = temperature(cfg, hours, hod, doy, xy, temp_phase)
    x_ref = float(scenario.tess.centers[:, 0].mean())
    elev = solar_elevation(hod, xy[:, 0], x_ref)
    prev = solar_elevation((hod - 1) % 24, xy[:, 0], x_ref)
    U[..., 3] = elev
    U[..., 4] = (elev - prev) / (2 * math.sin(math.pi / 24))
    U[..., 5] = is_day(cfg, hod)[:, None]
    U[..., 6] = (hod == cfg.dusk_hour)[:, None]
    U[..., 7] = (hod == cfg.dawn_hour)[:, None]
    U[..., 8] = ((doy - 1) / (n_days - 1))[:, None]
    return U


# -- ground truth ------------------------------------------------------------------------

def _face_normal_velocity(tess: Tessellation, vel: np.ndarray) -> np.ndarray:
    """(T, cells, 2) -> (T, faces) normal component of the face-averaged velocity."""
    vf = 0.5 * (vel[:, tess.face_i] + vel[:, tess.face_j])
    return np.einsum("tfk,fk->tf", vf, tess.face_normal)


def check_cfl(tess: Tessellation, vn: np.ndarray, dt: float) -> float:
    """Largest outflow fraction ``sum_out |f| a+ dt / |C|`` over cells and hours."""
    worst = 0.0
    for h in range(len(vn)):
        out = np.zeros(tess.n_cells)
        a = vn[h]
        np.add.at(out, tess.face_i, tess.face_length * np.maximum(a, 0.0))
        np.add.at(out, tess.face_j, tess.face_length * np.maximum(-a, 0.0))
        worst = max(worst, float((out * dt / tess.areas).max()))
    return worst


def source_rates(cfg: ScenarioConfig, times, hours, wind: WindField, temp_phase: float,
                 landcover: np.ndarray, xy: np.ndarray, t0, night_rng) -> tuple:
    """Hourly take-off rate and landing rate per cell, labelled by the step's end time."""
    hod = hour_of_day(times)
    doy, _ = day_of_year(times)
    T, P = len(times), len(xy)
    habitat = 0.6 + 1.6 * landcover[:, :4].sum(axis=1)
    gamma = np.zeros((T, P))
    delta = np.zeros((T, P))
    night = ~is_day(cfg, hod)
    delta[night] = cfg.night_landing_rate
    pre_dawn = [(cfg.dawn_hour - k) % 24 for k in range(3)]
    delta[np.isin(hod, pre_dawn)] = cfg.dawn_landing_rate
    dusk_idx = np.flatnonzero(hod == cfg.dusk_hour)
    mean_wind = wind.mean(hours)
    temp = temperature(cfg, hours, hod, doy, xy, temp_phase)
    for t in dusk_idx:
        tail = -mean_wind[t, 1] / max(cfg.mean_wind_kmh, 1e-9)
        weather = math.exp(0.6 * tail + 0.8 * float(temp[t].mean()) - 0.2
                           + 0.3 * night_rng.normal())
        for k in (1, 2):
            if t + k < T:
                gamma[t + k] = cfg.takeoff_rate * weather * habitat
    return gamma, delta


def simulate_ground_truth(scenario: Scenario, label: int) -> tuple[GroundTruth, WindField, float]:
    cfg = scenario.config
    fine = scenario.fine
    times = season_times(cfg, label)
    t0 = times[0]
    hours = (times - t0).astype(int).astype(float)
    rng = _substream(cfg.seed, "season", label)
    wind = WindField.random(cfg, rng)
    temp_phase = float(rng.uniform(0, 2 * np.pi))
    heading = np.asarray(cfg.heading_kmh, dtype=float)
    vel = wind(fine.centers, hours) + heading
    gamma, delta = source_rates(cfg, times, hours, wind, temp_phase, scenario.fine_landcover,
                                fine.centers, t0, _substream(cfg.seed, "nights", label))
    vn = _face_normal_velocity(fine, vel)
    dt = 1.0 / cfg.substeps
    cfl = check_cfl(fine, vn, dt)
    if cfl > 1.0:
        speed = float(np.linalg.norm(vel, axis=-1).max())
        raise CFLError(f"CFL number {cfl:.3f} > 1 for wind speeds up to {speed:.1f} km/h")
    hod = hour_of_day(times)
    reset_hour = (cfg.dawn_hour + 2) % 24
    reset = (hod[1:] == reset_hour)
    traj, srcs, ledger = kernels.advect_hours(
        np.zeros(fine.n_cells), fine, vn[1:], gamma[1:], delta[1:], reset, cfg.substeps, dt)
    fine_source = np.vstack([np.zeros((1, fine.n_cells)), srcs])
    truth = GroundTruth(times, hours, traj, vel, fine_source, ledger,
                        *aggregate(scenario, traj, vel, fine_source, gamma, delta))
    return truth, wind, temp_phase


def aggregate(scenario: Scenario, rho, vel, source, gamma, delta):
    """Area-weighted coarse-cell means of fine-grid fields (density-weighted velocity)."""
    owner = scenario.fine_owner
    area = scenario.fine.areas
    N = scenario.tess.n_cells
    inside = owner >= 0
    W = np.zeros((N, len(owner)))
    W[owner[inside], np.flatnonzero(inside)] = area[inside]
    tot = W.sum(axis=1, keepdims=True)
    Wn = W / tot
    rho_c = rho @ Wn.T
    mass = rho @ W.T  # (T, N)
    mv = np.stack([(rho * vel[..., 0]) @ W.T, (rho * vel[..., 1]) @ W.T], axis=-1)
    area_v = np.stack([vel[..., 0] @ Wn.T, vel[..., 1] @ Wn.T], axis=-1)
    small = mass <= 1e-9 * tot.T
    vel_c = np.where(small[..., None], area_v, mv / np.where(small, 1.0, mass)[..., None])
    return rho_c, vel_c, source @ Wn.T, gamma @ Wn.T, delta @ Wn.T


def sample_radars(scenario: Scenario, truth: GroundTruth, rng: np.random.Generator) -> SensorFrame:
    """Disk averages of the fine grid with noise; velocities dropped where rho* < 5."""
    cfg = scenario.config
    O = scenario.observe_fine
    rho = truth.fine_rho @ O.T  # (T, M)
    mv = np.stack([(truth.fine_rho * truth.fine_velocity[..., 0]) @ O.T,
                   (truth.fine_rho * truth.fine_velocity[..., 1]) @ O.T], axis=-1)
    av = np.stack([truth.fine_velocity[..., 0] @ O.T, truth.fine_velocity[..., 1] @ O.T], axis=-1)
    pos = rho > 1e-12
    vel = np.where(pos[..., None], mv / np.where(pos, rho, 1.0)[..., None], av)
    noisy = np.maximum(rho + cfg.noise_std * rng.standard_normal(rho.shape), 0.0)
    vel = vel + cfg.velocity_noise_std * rng.standard_normal(vel.shape)
    day = is_day(cfg, hour_of_day(truth.times))
    noisy[day] = 0.0
    vel[day] = 0.0
    vel[rho < 5.0] = np.nan
    valid = rng.random(rho.shape) >= cfg.missing_rate
    return SensorFrame(noisy, vel, valid)


def generate(cfg: ScenarioConfig, scenario: Scenario | None = None) -> Dataset:
    scenario = scenario or build_scenario(cfg)
    seasons = {}
    for label in cfg.seasons:
        truth, wind, temp_phase = simulate_ground_truth(scenario, label)
        frames = sample_radars(scenario, truth, _substream(cfg.seed, "radar", label))
        env = gen_env_features(scenario, scenario.tess, truth.times, wind, temp_phase,
                               truth.times[0])
        night = ~is_day(cfg, hour_of_day(truth.times))
        seasons[label] = Season(label, truth.times, frames, env, night, truth)
    return Dataset(scenario.tess, scenario.network, scenario.landcover, seasons,
                   FEATURE_NAMES, cfg)


# -- uniform advection refinement study ------------------------------------------------

def gaussian_bump(xy, center, width, period):
    """Periodic sum of Gaussian images on a torus of size ``period``."""
    total = np.zeros(len(xy))
    for sx in (-1, 0, 1):
        for sy in (-1, 0, 1):
            d = xy - center - np.array([sx * period[0], sy * period[1]])
            total += np.exp(-0.5 * (d ** 2).sum(axis=1) / width ** 2)
    return total


def cell_average(tess: Tessellation, fn, n_sub: int = 6) -> np.ndarray:
    """Average of ``fn`` over each hexagon from a triangular sub-grid of points."""
    out = np.empty(tess.n_cells)
    bary = []
    for a in range(n_sub + 1):
        for b in range(n_sub + 1 - a):
            bary.append((a / n_sub, b / n_sub))
    bary = np.asarray(bary)
    for c, poly in enumerate(tess.cells):
        ctr = tess.centers[c]
        pts = []
        for k in range(len(poly)):
            p, q = poly[k] - ctr, poly[(k + 1) % len(poly)] - ctr
            pts.append(ctr + bary[:, :1] * p + bary[:, 1:] * q)
        pts = np.unique(np.round(np.vstack(pts), 9), axis=0)
        out[c] = fn(pts).mean()
    return out


def uniform_advection_error(cell_diameter_km: float, domain_cells: tuple, velocity,
                            hours: float, courant: float = 0.5, width_km: float = 250.0,
                            impl=None) -> float:
    """Relative L1 error of upwind advection of a Gaussian on a periodic hex grid.

    The time step is chosen so that ``|v| dt / (sqrt(3) R)`` equals ``courant``,
    i.e. it shrinks with the cell size.
    """
    n_cols, n_rows = domain_cells
    tess = build_hex_torus(n_cols, n_rows, cell_diameter_km)
    period = np.asarray(torus_period(n_cols, n_rows, cell_diameter_km))
    v = np.asarray(velocity, dtype=float)
    speed = float(np.linalg.norm(v))
    spacing = math.sqrt(3) * cell_diameter_km / 2
    steps = max(1, int(round(hours * speed / (courant * spacing))))
    dt = hours / steps
    center = period / 2
    rho0 = cell_average(tess, lambda p: gaussian_bump(p, center, width_km, period))
    exact = cell_average(tess, lambda p: gaussian_bump(p, (center + v * hours) % period,
                                                       width_km, period))
    vn = np.tile(tess.face_normal @ v, (1, 1))
    zeros = np.zeros((1, tess.n_cells))
    traj, _, _ = kernels.advect_hours(rho0, tess, vn, zeros, zeros, np.zeros(1, bool),
                                      steps, dt, impl=impl)
    num = traj[-1]
    return float(np.sum(np.abs(num - exact) * tess.areas) / np.sum(np.abs(exact) * tess.areas))


def coarse_step_errors(scenario: Scenario, truth: GroundTruth, min_mass: float = 1.0):
    """One coarse upwind step from aggregated truth vs the aggregated next state.

    Uses the aggregated v* and integrated s* of each hour. Returns (T', 2) relative L1
    errors over interior cells: column 0 with fluxes, column 1 with sources only.
    Reset hours and hours with (almost) no birds are skipped.
    """
    tess = scenario.tess
    cfg = scenario.config
    hod = hour_of_day(truth.times)
    interior = ~tess.boundary
    rows = []
    for k in range(len(truth.times) - 1):
        rho, nxt = truth.rho[k], truth.rho[k + 1]
        if hod[k + 1] == (cfg.dawn_hour + 2) % 24 or rho[interior].sum() < min_mass:
            continue
        vn = _face_normal_velocity(tess, truth.velocity[k + 1][None])[0]
        flux = kernels.upwind_flux(rho, vn, tess.face_i, tess.face_j, tess.face_length, 1.0)
        div = kernels.divergence(flux, tess.face_i, tess.face_j, tess.n_cells)
        local = rho + truth.source[k + 1]
        pred = local - div / tess.areas
        scale = np.abs(nxt[interior]).sum()
        rows.append((np.abs(pred - nxt)[interior].sum() / scale,
                     np.abs(local - nxt)[interior].sum() / scale))
    return np.asarray(rows)


# -- files -------------------------------------------------------------------------------

def write_env_csv(path, times, env: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "cell_id"] + [f"f{k}" for k in range(env.shape[-1])])
        for t, ts in enumerate(times):
            stamp = format_time(ts)
            for c in range(env.shape[1]):
                w.writerow([stamp, c] + [repr(float(v)) for v in env[t, c]])


def read_env_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    D = len(header) - 2
    stamps = sorted({r[0] for r in rows})
    cells = max(int(r[1]) for r in rows) + 1
    tix = {s: n for n, s in enumerate(stamps)}
    env = np.zeros((len(stamps), cells, D))
    for r in rows:
        env[tix[r[0]], int(r[1])] = [float(v) for v in r[2:]]
    times = np.array([np.datetime64(s.rstrip("Z"), "h") for s in stamps])
    return times, env


def write_static_csv(path, landcover: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell_id"] + [f"c{k}" for k in range(landcover.shape[1])])
        for c, row in enumerate(landcover):
            w.writerow([c] + [repr(float(v)) for v in row])


def read_static_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        rows = sorted(([int(r[0])] + [float(v) for v in r[1:]] for r in reader))
    return np.asarray([r[1:] for r in rows])


def write_truth_jsonl(path, truth: GroundTruth) -> None:
    with open(path, "w") as fh:
        for t, ts in enumerate(truth.times):
            stamp = format_time(ts)
            for c in range(truth.rho.shape[1]):
                fh.write(json.dumps({
                    "time": stamp, "step": t, "cell": c,
                    "rho": float(truth.rho[t, c]),
                    "vx": float(truth.velocity[t, c, 0]), "vy": float(truth.velocity[t, c, 1]),
                    "delta": float(truth.delta[t, c]), "gamma": float(truth.gamma[t, c]),
                    "s": float(truth.source[t, c]),
                }, sort_keys=True) + "\n")


def read_truth_jsonl(path, n_cells: int):
    recs = [json.loads(line) for line in open(path)]
    T = max(r["step"] for r in recs) + 1
    out = {k: np.zeros((T, n_cells)) for k in ("rho", "vx", "vy", "delta", "gamma", "s")}
    for r in recs:
        for k in out:
            out[k][r["step"], r["cell"]] = r[k]
    return out


def coarse_truth(fields: dict, times) -> GroundTruth:
    """GroundTruth holding only the coarse aggregates (fine-grid arrays left empty)."""
    T = len(times)
    hours = (times - times[0]).astype(int).astype(float)
    empty = np.zeros((T, 0))
    return GroundTruth(times, hours, empty, np.zeros((T, 0, 2)), empty, np.zeros((0, 4)),
                       fields["rho"], np.stack([fields["vx"], fields["vy"]], axis=-1),
                       fields["s"], fields["gamma"], fields["delta"])


def write_dataset(directory, ds: Dataset) -> list[str]:
    os.makedirs(directory, exist_ok=True)
    written = []

    def path(name):
        p = os.path.join(directory, name)
        written.append(name)
        return p

    with open(path("tessellation.json"), "w") as fh:
        fh.write(ds.tess.to_json())
    write_network_csv(path("network.csv"), ds.network)
    write_static_csv(path("static.csv"), ds.landcover)
    for label, season in ds.seasons.items():
        write_sensor_csv(path(f"sensors_{label}.csv"), season.times, ds.network.ids, season.frames)
        write_env_csv(path(f"env_{label}.csv"), season.times, season.env)
        if season.truth is not None:
            write_truth_jsonl(path(f"truth_{label}.jsonl"), season.truth)
    meta = {
        "seasons": [int(s) for s in ds.seasons],
        "feature_names": list(ds.feature_names),
        "day_feature": ds.feature_names.index("is_day"),
        "scenario": ds.scenario.to_dict() if ds.scenario else None,
    }
    with open(path("dataset.json"), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
    return written


def read_dataset(directory) -> Dataset:
    with open(os.path.join(directory, "dataset.json")) as fh:
        meta = json.load(fh)
    with open(os.path.join(directory, "tessellation.json")) as fh:
        tess = Tessellation.from_json(fh.read())
    net = read_network_csv(os.path.join(directory, "network.csv"))
    landcover = read_static_csv(os.path.join(directory, "static.csv"))
    seasons = {}
    for label in meta["seasons"]:
        times, ids, frames = read_sensor_csv(os.path.join(directory, f"sensors_{label}.csv"),
                                             net.ids)
        etimes, env = read_env_csv(os.path.join(directory, f"env_{label}.csv"))
        if not np.array_equal(times, etimes):
            raise ValueError(f"season {label}: sensor and env time axes differ")
        night = env[:, 0, meta["day_feature"]] < 0.5
        truth = None
        tpath = os.path.join(directory, f"truth_{label}.jsonl")
        if os.path.exists(tpath):
            truth = coarse_truth(read_truth_jsonl(tpath, tess.n_cells), times)
        seasons[label] = Season(label, times, frames, env, night, truth)
    scen = ScenarioConfig.from_dict(meta["scenario"]) if meta.get("scenario") else None
    return Dataset(tess, net, landcover, seasons, tuple(meta["feature_names"]), scen)
