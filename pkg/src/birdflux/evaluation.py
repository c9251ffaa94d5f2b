"""Forecast evaluation: density and velocity metrics, baselines and binned reports.

All metrics take physical units (birds/km^2, km/h). Masks select the radar-hours
that count: valid measurements at night.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import FluxModel, Scaling, predict
from .train import SeasonData, Sequence, VELOCITY_MIN_DENSITY, assemble

HORIZON_BINS = ((0, 24), (24, 48), (48, 72))


def _masked(pred, obs, mask):
    pred, obs = np.asarray(pred, dtype=float), np.asarray(obs, dtype=float)
    if mask is None:
        mask = np.ones(np.broadcast_shapes(pred.shape, obs.shape), dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    return pred[mask], obs[mask]


def rmse(pred, obs, mask=None):
    """Root mean squared error over ``mask``; ``None`` when nothing is selected."""
    p, o = _masked(pred, obs, mask)
    if p.size == 0:
        return None
    return float(np.sqrt(np.mean((p - o) ** 2)))


def precision_recall(pred, obs, threshold: float = 150.0, mask=None):
    """Event detection scores for ``value > threshold``; absent denominators give ``None``."""
    p, o = _masked(pred, obs, mask)
    pe, oe = p > threshold, o > threshold
    tp = int(np.sum(pe & oe))
    fp = int(np.sum(pe & ~oe))
    fn = int(np.sum(~pe & oe))
    precision = tp / (tp + fp) if tp + fp else None
    recall = tp / (tp + fn) if tp + fn else None
    return precision, recall


def event_threshold(densities, mask=None, q: float = 0.95) -> float:
    """Quantile of observed nighttime densities, the synthetic stand-in for 150 birds/km^2."""
    d = np.asarray(densities, dtype=float)
    d = d[np.asarray(mask, dtype=bool)] if mask is not None else d.ravel()
    return float(np.quantile(d, q))


def velocity_metrics(pred_v, obs_v, obs_density=None, mask=None):
    """(speed RMSE, mean absolute circular heading difference in degrees).

    Radar-hours with observed density at or below 5 birds/km^2 are left out.
    """
    pred_v, obs_v = np.asarray(pred_v, dtype=float), np.asarray(obs_v, dtype=float)
    sel = np.all(np.isfinite(obs_v), axis=-1) & np.all(np.isfinite(pred_v), axis=-1)
    if mask is not None:
        sel &= np.asarray(mask, dtype=bool)
    if obs_density is not None:
        sel &= np.asarray(obs_density) > VELOCITY_MIN_DENSITY
    p, o = pred_v[sel], obs_v[sel]
    if len(p) == 0:
        return None, None
    ps, os_ = np.linalg.norm(p, axis=-1), np.linalg.norm(o, axis=-1)
    speed = float(np.sqrt(np.mean((ps - os_) ** 2)))
    hp = np.degrees(np.arctan2(p[:, 1], p[:, 0]))
    ho = np.degrees(np.arctan2(o[:, 1], o[:, 0]))
    diff = np.abs((hp - ho + 180.0) % 360.0 - 180.0)
    return speed, float(diff.mean())


def heading_error(h1_deg, h2_deg):
    return np.abs((np.asarray(h1_deg) - np.asarray(h2_deg) + 180.0) % 360.0 - 180.0)


# -- historical average ------------------------------------------------------------------

@dataclass
class HistoricalAverage:
    """Per (radar, day-of-season, hour) climatology with a +-window smoothing."""

    density: np.ndarray  # (days, 24, M)
    velocity: np.ndarray  # (days, 24, M, 2)
    fallback_density: np.ndarray  # (M,)
    fallback_velocity: np.ndarray  # (M, 2)

    def predict(self, day_index, hour, radar=None):
        """Values for arrays of (day-of-season, hour); unseen days use the radar fallback."""
        day_index = np.asarray(day_index)
        hour = np.asarray(hour)
        D = self.density.shape[0]
        inside = (day_index >= 0) & (day_index < D)
        d = np.clip(day_index, 0, D - 1)
        rho = self.density[d, hour]
        vel = self.velocity[d, hour]
        rho = np.where(inside[..., None] & np.isfinite(rho), rho, self.fallback_density)
        vel = np.where(inside[..., None, None] & np.isfinite(vel), vel, self.fallback_velocity)
        if radar is not None:
            return rho[..., radar], vel[..., radar, :]
        return rho, vel


def historical_average(seasons, window_days: int = 7) -> HistoricalAverage:
    """Average sensor frames over training seasons.

    ``seasons`` are objects with ``times`` and unscaled ``frames`` covering the same
    calendar span. Densities average valid readings; velocities only readings with
    density above 5 birds/km^2.
    """
    if not seasons:
        raise ValueError("need at least one training season")
    T = min(len(s.times) for s in seasons)
    M = seasons[0].frames.density.shape[-1]
    days = int(math.ceil(T / 24))
    sum_r = np.zeros((days, 24, M))
    cnt_r = np.zeros((days, 24, M))
    sum_v = np.zeros((days, 24, M, 2))
    cnt_v = np.zeros((days, 24, M))
    for s in seasons:
        f = s.frames
        hours = (s.times[:T] - s.times[0].astype("datetime64[D]")).astype(int)
        di, hi = hours // 24, hours % 24
        valid = f.valid[:T]
        vvalid = f.velocity_valid()[:T] & (f.density[:T] > VELOCITY_MIN_DENSITY)
        np.add.at(sum_r, (di, hi), np.where(valid, f.density[:T], 0.0))
        np.add.at(cnt_r, (di, hi), valid)
        np.add.at(sum_v, (di, hi), np.where(vvalid[..., None], f.velocity[:T], 0.0))
        np.add.at(cnt_v, (di, hi), vvalid)

    def smooth(a):
        out = np.zeros_like(a)
        for d in range(days):
            lo, hi = max(0, d - window_days), min(days, d + window_days + 1)
            out[d] = a[lo:hi].sum(axis=0)
        return out

    sr, cr, sv, cv = smooth(sum_r), smooth(cnt_r), smooth(sum_v), smooth(cnt_v)
    with np.errstate(invalid="ignore", divide="ignore"):
        dens = np.where(cr > 0, sr / np.where(cr > 0, cr, 1), np.nan)
        vel = np.where(cv[..., None] > 0, sv / np.where(cv > 0, cv, 1)[..., None], np.nan)
        fb_r = np.where(cnt_r.sum((0, 1)) > 0, sum_r.sum((0, 1)) / np.maximum(cnt_r.sum((0, 1)), 1), 0.0)
        fb_v = np.where(cnt_v.sum((0, 1))[:, None] > 0,
                        sum_v.sum((0, 1)) / np.maximum(cnt_v.sum((0, 1)), 1)[:, None], 0.0)
    return HistoricalAverage(dens, vel, fb_r, fb_v)


# -- forecasting over sequences ----------------------------------------------------------

@dataclass
class SequenceForecasts:
    """Radar-space and cell-space forecasts for a list of sequences (physical units)."""

    radar_density: np.ndarray  # (S, K, M)
    radar_velocity: np.ndarray  # (S, K, M, 2)
    obs_density: np.ndarray  # (S, K, M)
    obs_velocity: np.ndarray  # (S, K, M, 2), NaN where no velocity target
    mask: np.ndarray  # (S, K, M) valid and night
    cell_density: np.ndarray  # (S, K+1, N)
    cell_velocity: np.ndarray  # (S, K, N, 2)
    cell_source: np.ndarray  # (S, K, N)
    origins: list = field(default_factory=list)  # (season index, origin index)


def forecast_sequences(model: FluxModel, params: dict, seasons: list, seqs: list,
                       horizon: int, batch_size: int = 32) -> SequenceForecasts:
    sc: Scaling = model.config.scaling
    N = model.tess.n_cells
    parts = []
    for a in range(0, len(seqs), batch_size):
        chunk = seqs[a:a + batch_size]
        b = assemble(seasons, chunk, horizon)
        run = predict(model, params, b.pseudo, b.env, b.rho0, horizon, b.size)
        B = b.size
        rho = run.rho.reshape(horizon + 1, B, N).transpose(1, 0, 2) / sc.density
        vel = run.velocity.reshape(horizon, B, N, 2).transpose(1, 0, 2, 3) / sc.velocity
        src = run.source.reshape(horizon, B, N).transpose(1, 0, 2) / sc.density
        O = b.observe
        rd = rho[:, 1:] @ O.T
        rv = np.stack([vel[..., 0] @ O.T, vel[..., 1] @ O.T], axis=-1)
        od = b.rho_obs.transpose(1, 0, 2) / sc.density
        ov = np.where(b.mask_v[..., None], b.vel_obs, np.nan).transpose(1, 0, 2, 3) / sc.velocity
        parts.append((rd, rv, od, ov, b.mask_rho.transpose(1, 0, 2), rho, vel, src))
    cat = [np.concatenate([p[i] for p in parts]) for i in range(8)]
    return SequenceForecasts(*cat, origins=[(q.season, q.origin) for q in seqs])


def historical_forecasts(ha: HistoricalAverage, seasons: list, seqs: list, horizon: int,
                         radar_index=None):
    """Historical-average predictions aligned with ``forecast_sequences`` output."""
    rho, vel = [], []
    for q in seqs:
        sd = seasons[q.season]
        t = np.arange(q.origin + 1, q.origin + 1 + horizon)
        hours = (sd.times[t] - sd.times[0].astype("datetime64[D]")).astype(int)
        r, v = ha.predict(hours // 24, hours % 24)
        if radar_index is not None:
            r, v = r[:, radar_index], v[:, radar_index]
        rho.append(r)
        vel.append(v)
    return np.stack(rho), np.stack(vel)


# -- reports -----------------------------------------------------------------------------

@dataclass
class MetricReport:
    rmse: float | None
    precision: float | None
    recall: float | None
    threshold: float
    speed_rmse: float | None
    direction_error: float | None
    count: int
    horizon_bins: list = field(default_factory=list)
    density_bins: list = field(default_factory=list)
    per_radar: dict = field(default_factory=dict)
    relative_rmse_change: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def density_terciles(obs, mask) -> tuple:
    o = np.asarray(obs)[np.asarray(mask, dtype=bool)]
    if o.size == 0:
        return (0.0, 0.0)
    return tuple(float(x) for x in np.quantile(o, [1 / 3, 2 / 3]))


def binned_reports(pred, obs, mask, horizon_bins=HORIZON_BINS, density_edges=None):
    """RMSE and counts per forecast-horizon bin and per observed-density tercile.

    Arrays are (S, K, M); horizon bin ``(a, b)`` holds steps ``a < k <= b`` (1-based).
    The density bins always cover every masked entry.
    """
    pred, obs, mask = np.asarray(pred), np.asarray(obs), np.asarray(mask, dtype=bool)
    K = obs.shape[1]
    steps = np.arange(1, K + 1)[None, :, None]
    hb = []
    for a, b in horizon_bins:
        sel = mask & (steps > a) & (steps <= b)
        hb.append({"bin": [a, b], "count": int(sel.sum()), "rmse": rmse(pred, obs, sel)})
    if density_edges is None:
        density_edges = density_terciles(obs, mask)
    edges = [-np.inf, *density_edges, np.inf]
    db = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = mask & (obs > lo) & (obs <= hi) if lo > -np.inf else mask & (obs <= hi)
        db.append({"bin": [None if not np.isfinite(lo) else lo, None if not np.isfinite(hi) else hi],
                   "count": int(sel.sum()), "rmse": rmse(pred, obs, sel)})
    return hb, db


def per_radar_rmse(pred, obs, mask, ids) -> dict:
    return {rid: rmse(pred[..., m], obs[..., m], mask[..., m]) for m, rid in enumerate(ids)}


def relative_rmse_change(held_out: dict, trained: dict) -> dict:
    """Per radar: (held-out RMSE - mean in-sample RMSE) / mean in-sample RMSE.

    ``held_out`` maps radar -> RMSE from the fold where it was excluded; ``trained``
    maps radar -> list of RMSEs from folds where it was used. Radars never held out
    (or never trained on) are absent.
    """
    out = {}
    for rid, out_rmse in held_out.items():
        ins = [x for x in trained.get(rid, []) if x is not None]
        if out_rmse is None or not ins:
            continue
        base = float(np.mean(ins))
        if base > 0:
            out[rid] = (out_rmse - base) / base
    return out


def report(fc: SequenceForecasts, ids, threshold: float | None = None) -> MetricReport:
    mask = fc.mask
    if threshold is None:
        threshold = event_threshold(fc.obs_density, mask)
    p, r = precision_recall(fc.radar_density, fc.obs_density, threshold, mask)
    speed, direction = velocity_metrics(fc.radar_velocity, fc.obs_velocity, fc.obs_density, mask)
    hb, db = binned_reports(fc.radar_density, fc.obs_density, mask)
    return MetricReport(rmse(fc.radar_density, fc.obs_density, mask), p, r, threshold, speed,
                        direction, int(mask.sum()), hb, db,
                        per_radar_rmse(fc.radar_density, fc.obs_density, mask, ids))


def write_per_radar_csv(path, per_radar: dict, relative: dict | None = None) -> None:
    relative = relative or {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["radar_id", "rmse", "relative_rmse_change"])
        for rid in sorted(per_radar):
            v = per_radar[rid]
            rc = relative.get(rid)
            w.writerow([rid, "" if v is None else repr(v), "" if rc is None else repr(rc)])


def write_long_csv(path, fc: SequenceForecasts, ids) -> None:
    """Plot-ready long table: one row per (sequence, step, radar)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sequence", "step", "radar_id", "pred_density", "obs_density",
                    "pred_vx", "pred_vy", "obs_vx", "obs_vy", "counted"])
        S, K, M = fc.radar_density.shape
        f = lambda x: "" if not np.isfinite(x) else repr(float(x))
        for s in range(S):
            for k in range(K):
                for m in range(M):
                    w.writerow([s, k + 1, ids[m], f(fc.radar_density[s, k, m]),
                                f(fc.obs_density[s, k, m]), f(fc.radar_velocity[s, k, m, 0]),
                                f(fc.radar_velocity[s, k, m, 1]), f(fc.obs_velocity[s, k, m, 0]),
                                f(fc.obs_velocity[s, k, m, 1]), int(fc.mask[s, k, m])])


# -- oracle comparison (synthetic truth) -------------------------------------------------

def truth_alignment(fc: SequenceForecasts, seqs: list, truths: list, horizon: int,
                    with_density: bool = False):
    """Gather ground-truth cell velocity/source for each forecast step.

    ``truths[season]`` is a ground-truth record with ``velocity`` (T, N, 2) and
    ``source`` (T, N) labelled by the end of the step they drive. With
    ``with_density`` the density each step advects (the state at its start) is
    returned as well.
    """
    vt, st, rt = [], [], []
    for q in seqs:
        g = truths[q.season]
        t = np.arange(q.origin + 1, q.origin + 1 + horizon)
        vt.append(g.velocity[t])
        st.append(g.source[t])
        if with_density:
            rt.append(g.rho[t - 1])
    if with_density:
        return np.stack(vt), np.stack(st), np.stack(rt)
    return np.stack(vt), np.stack(st)


def oracle_recovery(fc: SequenceForecasts, seqs: list, seasons: list, truths: list,
                    horizon: int, cells=None, min_density: float = 5.0) -> dict:
    """Velocity correlation and source sign agreement at night.

    Only ``cells`` (default: all) are compared. Velocities are correlated where the
    true density being advected exceeds ``min_density``: an empty sky has no bird
    velocity to recover. Sign agreement is measured on cell-hours where ``|s*|``
    exceeds its median.
    """
    vt, st, rt = truth_alignment(fc, seqs, truths, horizon, with_density=True)
    night = np.stack([seasons[q.season].night[q.origin + 1:q.origin + 1 + horizon] for q in seqs])
    sel = np.broadcast_to(night[..., None], st.shape).copy()
    if cells is not None:
        keep = np.zeros(st.shape[-1], dtype=bool)
        keep[cells] = True
        sel &= keep
    occupied = sel & (rt > min_density)
    pv = fc.cell_velocity[occupied]
    tv = vt[occupied]
    r = [float(np.corrcoef(pv[:, c], tv[:, c])[0, 1]) for c in range(2)]
    ps, ts = fc.cell_source[sel], st[sel]
    active = np.abs(ts) > np.median(np.abs(ts))
    agree = float(np.mean(np.sign(ps[active]) == np.sign(ts[active]))) if active.any() else None
    return {"pearson_vx": r[0], "pearson_vy": r[1], "sign_agreement": agree,
            "n_cell_hours": int(sel.sum()), "n_occupied": int(occupied.sum()),
            "n_active": int(active.sum())}


# -- spatial cross-validation harness ----------------------------------------------------

@dataclass
class CVResult:
    folds: list  # (train ids, test ids)
    fold_rmse: list  # per fold: {radar: rmse} over all radars
    held_out: dict  # radar -> rmse when excluded
    trained: dict  # radar -> [rmse when included]
    relative_change: dict

    @property
    def mean_relative_change(self) -> float | None:
        vals = list(self.relative_change.values())
        return float(np.mean(vals)) if vals else None

    def to_dict(self) -> dict:
        return {"folds": [{"train": list(a), "test": list(b)} for a, b in self.folds],
                "fold_rmse": self.fold_rmse, "held_out": self.held_out,
                "trained": self.trained, "relative_change": self.relative_change,
                "mean_relative_change": self.mean_relative_change}


def run_spatial_cv(dataset, model_config, train_config, n_folds: int, seed: int,
                   train_labels, val_labels, test_labels, horizon: int = 72,
                   on_fold=None) -> CVResult:
    """Train one model per fold without the fold's test radars, evaluate on all radars."""
    from .model import make_static
    from .train import fit, make_sequences, prepare_season, spatial_cv_split

    tess, net = dataset.tess, dataset.network
    static = make_static(tess, dataset.landcover, model_config.scaling)
    model = FluxModel(model_config, tess, static)
    folds = spatial_cv_split(net.ids, n_folds, seed)
    held, trained, fold_rmse = {}, {}, []
    for f, (train_ids, test_ids) in enumerate(folds):
        prep = lambda labels, tgt: [prepare_season(dataset.seasons[l], tess, net, train_ids, tgt,
                                                   model_config.scaling, model_config.k_neighbors)
                                    for l in labels]
        res = fit(model, prep(train_labels, train_ids), train_config,
                  prep(val_labels, train_ids) if val_labels else None)
        test = prep(test_labels, net.ids)
        seqs = make_sequences(test, train_config.context, horizon, "eval", 1,
                              train_config.max_missing)
        fc = forecast_sequences(model, res.params, test, seqs, horizon)
        per = per_radar_rmse(fc.radar_density, fc.obs_density, fc.mask, net.ids)
        fold_rmse.append(per)
        for rid, v in per.items():
            if rid in test_ids:
                held[rid] = v
            else:
                trained.setdefault(rid, []).append(v)
        if on_fold is not None:
            on_fold(f, per)
    return CVResult(folds, fold_rmse, held, trained, relative_rmse_change(held, trained))
