"""Sequence construction, loss, horizon curriculum, Adam and the training loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .model import FluxModel, NonFiniteError, Scaling, fill_missing
from .nets import as_constants, as_leaves
from .obsmap import (SensorNetwork, build_cell_to_radar, build_radar_to_cell,
                     interpolate_to_cells)

log = logging.getLogger(__name__)

LOG_HEADER = ["epoch", "K", "loss", "loss_rho", "loss_v", "grad_norm", "neg_cells"]
VELOCITY_MIN_DENSITY = 5.0  # birds/km^2, observed density needed for a velocity target


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.1
    lr: float = 1e-4
    batch_size: int = 32
    epochs: int = 500
    k_start: int = 2
    k_max: int = 48
    k_step: int = 2
    k_every: int = 10
    fixed_horizon: int = 0  # > 0 disables the curriculum
    context: int = 24
    val_horizon: int = 48
    stride: int = 1
    max_missing: float = 0.1
    clip_norm: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.k_max < self.k_start:
            raise ValueError("k_max must be >= k_start")
        if self.k_start < 1 or self.k_step < 0 or self.k_every < 1:
            raise ValueError("invalid curriculum settings")

    def to_dict(self) -> dict:
        return asdict(self)


def substream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, sum(map(ord, name)) * 7919]))


# -- curriculum and optimiser ------------------------------------------------------------

def curriculum_horizon(epoch: int, cfg: TrainConfig) -> int:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if cfg.fixed_horizon > 0:
        return cfg.fixed_horizon
    return min(cfg.k_max, cfg.k_start + (epoch // cfg.k_every) * cfg.k_step)


def epochs_to_max(cfg: TrainConfig) -> int:
    if cfg.k_step == 0:
        return 0 if cfg.k_start >= cfg.k_max else math.inf
    return cfg.k_every * math.ceil((cfg.k_max - cfg.k_start) / cfg.k_step)


def step_for_budget(epochs: int, k_start: int = 2, k_max: int = 48, k_every: int = 10) -> int:
    """Smallest increment that reaches ``k_max`` before the last epoch."""
    n_inc = max(1, (epochs - 1) // k_every)
    return max(1, math.ceil((k_max - k_start) / n_inc))


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()}, 0)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update. Returns ``(params, state, skipped)``."""
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        log.warning("non-finite gradient, skipping optimiser step")
        return params, state, True
    t = state.t + 1
    m, v, new = {}, {}, {}
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p)
        m[k] = beta1 * state.m[k] + (1 - beta1) * g
        v[k] = beta2 * state.v[k] + (1 - beta2) * g * g
        mhat = m[k] / (1 - beta1 ** t)
        vhat = v[k] / (1 - beta2 ** t)
        new[k] = p - lr * mhat / (np.sqrt(vhat) + eps)
    return new, AdamState(m, v, t), False


def global_norm(grads: dict) -> float:
    return float(math.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_gradients(grads: dict, max_norm: float):
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        f = max_norm / norm
        return {k: g * f for k, g in grads.items()}, norm
    return grads, norm


# -- data preparation --------------------------------------------------------------------

@dataclass
class SeasonData:
    """One season prepared for a given split of the radars (all arrays scaled).

    Inputs (pseudo-measurements, initial states) come only from ``input_ids``; targets
    and masks refer to ``target_ids``.
    """

    label: object
    times: np.ndarray
    pseudo: np.ndarray  # (T, N, 3)
    env: np.ndarray  # (T, N, D)
    night: np.ndarray  # (T,)
    input_valid: np.ndarray  # (T, M_in)
    rho_obs: np.ndarray  # (T, M_t)
    vel_obs: np.ndarray  # (T, M_t, 2)
    mask_rho: np.ndarray  # (T, M_t)
    mask_v: np.ndarray  # (T, M_t)
    observe: np.ndarray  # (M_t, N)
    input_ids: tuple
    target_ids: tuple


def prepare_season(season, tess, net: SensorNetwork, input_ids, target_ids,
                   scaling: Scaling = Scaling(), k: int = 10) -> SeasonData:
    ix_in = [net.ids.index(r) for r in input_ids]
    ix_t = [net.ids.index(r) for r in target_ids]
    frames = season.frames
    fin = frames.take(ix_in)
    rmap = build_radar_to_cell(tess, net.subset(ix_in), k)
    pf = interpolate_to_cells(rmap, fin)
    adj = tess.adjacency
    dens = np.vstack([fill_missing(pf.density[t], pf.missing[t], adj)
                      for t in range(len(season.times))])
    pseudo = np.concatenate([dens[..., None] * scaling.density,
                             pf.velocity * scaling.velocity], axis=-1)
    ft = frames.take(ix_t)
    night = np.asarray(season.night, dtype=bool)
    mask_rho = ft.valid & night[:, None]
    mask_v = ft.velocity_valid() & mask_rho & (ft.density > VELOCITY_MIN_DENSITY)
    vel = np.where(np.isfinite(ft.velocity), ft.velocity, 0.0) * scaling.velocity
    O = build_cell_to_radar(tess, net.subset(ix_t)).matrix
    return SeasonData(season.label, season.times, pseudo, season.env, night, fin.valid,
                      np.where(ft.valid, ft.density, 0.0) * scaling.density, vel,
                      mask_rho, mask_v, O, tuple(input_ids), tuple(target_ids))


@dataclass(frozen=True)
class Sequence:
    season: int  # index into the list of SeasonData
    start: int  # index of the first context frame
    context: int
    horizon: int
    start_time: np.datetime64
    missing_fraction: float

    @property
    def origin(self) -> int:
        """Index of the last context frame, the forecast's initial time."""
        return self.start + self.context - 1


def make_sequences(seasons, context: int = 24, horizon: int = 48, mode: str = "train",
                   stride: int = 1, max_missing: float = 0.1, start_hour: int = 13) -> list:
    """Windows of ``context + horizon`` hours.

    ``train``: every ``stride`` hours. ``eval``: windows whose first context frame is at
    ``start_hour``. Windows with more than ``max_missing`` invalid input radar-hours are
    dropped.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    L = context + horizon
    out = []
    for s, sd in enumerate(seasons):
        T = len(sd.times)
        if T < L:
            log.warning("season %s shorter than one %d h window", sd.label, L)
            continue
        hod = sd.times.astype("datetime64[h]").astype(np.int64) % 24
        starts = range(0, T - L + 1, stride) if mode == "train" else \
            [t for t in range(T - L + 1) if hod[t] == start_hour]
        for t in starts:
            frac = 1.0 - float(sd.input_valid[t:t + L].mean())
            if frac > max_missing:
                continue
            out.append(Sequence(s, t, context, horizon, sd.times[t], frac))
    return out


@dataclass
class Batch:
    pseudo: np.ndarray  # (C, B*N, 3)
    env: np.ndarray  # (C+K, B*N, D)
    rho0: np.ndarray  # (B*N,)
    rho_obs: np.ndarray  # (K, B, M)
    vel_obs: np.ndarray  # (K, B, M, 2)
    mask_rho: np.ndarray
    mask_v: np.ndarray
    observe: np.ndarray  # (M, N)
    size: int
    horizon: int


def assemble(seasons, seqs, horizon: int) -> Batch:
    """Stack sequences along the cell axis (sequence-major), truncated to ``horizon``."""
    obs = seasons[seqs[0].season].observe
    C = seqs[0].context
    P, E, R0, RO, VO, MR, MV = [], [], [], [], [], [], []
    for q in seqs:
        sd = seasons[q.season]
        if horizon > q.horizon:
            raise ValueError("batch horizon exceeds sequence horizon")
        if sd.observe is not obs and not np.array_equal(sd.observe, obs):
            raise ValueError("sequences in one batch must share the target radars")
        a, o = q.start, q.origin
        P.append(sd.pseudo[a:a + C])
        E.append(sd.env[a:a + C + horizon])
        R0.append(sd.pseudo[o, :, 0])
        tgt = slice(o + 1, o + 1 + horizon)
        RO.append(sd.rho_obs[tgt])
        VO.append(sd.vel_obs[tgt])
        MR.append(sd.mask_rho[tgt])
        MV.append(sd.mask_v[tgt])
    return Batch(np.concatenate(P, axis=1), np.concatenate(E, axis=1), np.concatenate(R0),
                 np.stack(RO, axis=1), np.stack(VO, axis=1), np.stack(MR, axis=1),
                 np.stack(MV, axis=1), obs, len(seqs), horizon)


# -- loss --------------------------------------------------------------------------------

def loss(rho_steps, vel_steps, rho_obs, vel_obs, mask_rho, mask_v, observe: np.ndarray,
         lam: float):
    """Masked density + ``lam`` x velocity loss averaged over forecast steps.

    ``rho_steps[k]`` (B*N,) and ``vel_steps[k]`` (B*N, 2) are predictions for step k+1;
    targets are (K, B, M[, 2]). Returns ``(L, loss_rho, loss_v)`` with L a node.
    """
    K = len(rho_steps)
    B, M = rho_obs.shape[1], rho_obs.shape[2]
    N = observe.shape[1]
    OT = observe.T
    total = ad.const(0.0)
    lr_sum = lv_sum = 0.0
    for k in range(K):
        mr = mask_rho[k].astype(float)
        nr = mr.sum()
        if nr == 0:
            log.debug("no valid radars at step %d", k + 1)
            continue
        pr = ad.matmul(ad.reshape(rho_steps[k], (B, N)), OT)
        err = ad.sub(pr, rho_obs[k])
        lr_k = ad.scale(ad.sum_(ad.mul(ad.square(err), mr)), 1.0 / nr)
        term = lr_k
        lr_sum += float(lr_k.value)
        mv = mask_v[k].astype(float)
        nv = mv.sum()
        if nv > 0 and vel_steps is not None:
            v = ad.as_node(vel_steps[k])
            lv_k = ad.const(0.0)
            for c in range(2):
                pv = ad.matmul(ad.reshape(v[:, c], (B, N)), OT)
                lv_k = ad.add(lv_k, ad.sum_(ad.mul(ad.square(ad.sub(pv, vel_obs[k][..., c])), mv)))
            lv_k = ad.scale(lv_k, 1.0 / nv)
            lv_sum += float(lv_k.value)
            if lam > 0:
                term = ad.add(term, ad.scale(lv_k, lam))
        total = ad.add(total, term)
    if K == 0:
        return total, 0.0, 0.0
    return ad.scale(total, 1.0 / K), lr_sum / K, lv_sum / K


def batch_loss(model: FluxModel, P, batch: Batch, lam: float, training=False, rng=None):
    nodes = model.forward(P, batch.pseudo, batch.env, batch.rho0, batch.horizon,
                          batch.size, training, rng)
    L, lr, lv = loss(nodes.rho[1:], nodes.velocity, batch.rho_obs, batch.vel_obs,
                     batch.mask_rho, batch.mask_v, batch.observe, lam)
    neg = int(sum(int((r.value < 0).sum()) for r in nodes.rho[1:]))
    return L, lr, lv, neg, nodes


def loss_and_grad(model: FluxModel, params: dict, batch: Batch, lam: float, rng=None,
                  training: bool = True):
    leaves = as_leaves(params)
    with ad.Tape() as tape:
        L, lr, lv, neg, _ = batch_loss(model, leaves, batch, lam, training, rng)
        tape.backward(L)
    grads = {k: (n.grad if n.grad is not None else np.zeros_like(n.value))
             for k, n in leaves.items()}
    return float(L.value), lr, lv, neg, grads


def evaluate_loss(model: FluxModel, params: dict, seasons, seqs, horizon: int, lam: float,
                  batch_size: int = 32) -> float:
    """Mean loss over sequences at a fixed horizon (inference mode)."""
    if not seqs:
        return float("nan")
    P = as_constants(params)
    total = 0.0
    for a in range(0, len(seqs), batch_size):
        chunk = seqs[a:a + batch_size]
        try:
            L, *_ = batch_loss(model, P, assemble(seasons, chunk, horizon), lam)
            total += float(L.value) * len(chunk)
        except NonFiniteError:
            return float("inf")
    return total / len(seqs)


# -- spatial cross-validation ------------------------------------------------------------

def spatial_cv_split(radar_ids, n_folds: int = 10, seed: int = 0) -> list:
    ids = list(radar_ids)
    if not 1 <= n_folds <= len(ids):
        raise ValueError("n_folds must be between 1 and the number of radars")
    perm = np.random.default_rng(np.random.SeedSequence([seed, 1013])).permutation(len(ids))
    folds = []
    for part in np.array_split(perm, n_folds):
        test = set(int(p) for p in part)
        folds.append((tuple(ids[i] for i in range(len(ids)) if i not in test),
                      tuple(ids[i] for i in sorted(test))))
    return folds


# -- training loop -----------------------------------------------------------------------

@dataclass
class FitResult:
    params: dict  # best on validation (or final if there is no validation data)
    final_params: dict
    log: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = float("inf")
    status: str = "ok"


def fit(model: FluxModel, train_seasons, cfg: TrainConfig, val_seasons=None, params=None,
        on_epoch=None) -> FitResult:
    """Mini-batch training with the horizon curriculum and best-on-validation selection."""
    if params is None:
        params = model.init_params(substream(cfg.seed, "init"))
    params = {k: np.array(v, dtype=float) for k, v in params.items()}
    order_rng = substream(cfg.seed, "order")
    drop_rng = substream(cfg.seed, "dropout")
    seqs = make_sequences(train_seasons, cfg.context, cfg.k_max if cfg.fixed_horizon <= 0
                          else max(cfg.k_max, cfg.fixed_horizon), "train", cfg.stride,
                          cfg.max_missing)
    if not seqs:
        raise ValueError("no training sequences")
    val_seqs = []
    if val_seasons:
        val_seqs = make_sequences(val_seasons, cfg.context, max(cfg.val_horizon, 1), "eval",
                                  1, cfg.max_missing)
    state = AdamState.zeros(params)
    result = FitResult(params, params)
    bad = 0
    for epoch in range(cfg.epochs):
        K = curriculum_horizon(epoch, cfg)
        perm = order_rng.permutation(len(seqs))
        sums = np.zeros(4)
        neg = 0
        n_b = 0
        diverged = False
        for a in range(0, len(perm), cfg.batch_size):
            chunk = [seqs[i] for i in perm[a:a + cfg.batch_size]]
            batch = assemble(train_seasons, chunk, K)
            try:
                L, lr_, lv_, ng, grads = loss_and_grad(model, params, batch, cfg.lam, drop_rng)
            except NonFiniteError:
                L, grads = float("nan"), None
            if not math.isfinite(L):
                bad += 1
                log.warning("non-finite loss at epoch %d", epoch)
                if bad >= 2:
                    diverged = True
                    break
                continue
            bad = 0
            grads, norm = clip_gradients(grads, cfg.clip_norm)
            params, state, _ = adam_step(params, grads, state, cfg.lr)
            sums += (L, lr_, lv_, norm)
            neg += ng
            n_b += 1
        m = sums / max(n_b, 1)
        result.log.append({"epoch": epoch, "K": K, "loss": m[0], "loss_rho": m[1],
                           "loss_v": m[2], "grad_norm": m[3], "neg_cells": neg})
        if val_seqs:
            vl = evaluate_loss(model, params, val_seasons, val_seqs, cfg.val_horizon, cfg.lam)
            result.val_loss.append(vl)
            if vl < result.best_val:
                result.best_val, result.best_epoch, result.params = vl, epoch, params
        else:
            result.params, result.best_epoch = params, epoch
        if on_epoch is not None:
            on_epoch(epoch, result)
        if diverged:
            result.status = "diverged"
            break
    result.final_params = params
    return result


def write_log_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_HEADER)
        for r in rows:
            w.writerow([r["epoch"], r["K"]] + [repr(float(r[k])) for k in LOG_HEADER[2:6]]
                       + [int(r["neg_cells"])])
