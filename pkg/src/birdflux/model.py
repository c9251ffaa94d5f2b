"""Hybrid forecaster: recurrent encoder/decoder driving a finite-volume rollout.

Two flux configurations share everything else:

* ``upwind`` (default): an MLP predicts cell velocities and fluxes use the upwind
  scheme; these velocities can be supervised.
* ``flowrate``: an edge MLP predicts the fraction of birds moving across each face
  (used with Voronoi tessellations of the radar network).

All model inputs are already scaled (densities x0.001, velocities and lengths x0.01).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import fvm
from .nets import GAT, MLP, LSTMCell, as_constants, graph_edges
from .tessellation import Tessellation

DECODER_INPUT_ORDER = ("rho_hat", "env", "static_embedding", "encoder_state")


@dataclass(frozen=True)
class Scaling:
    density: float = 0.001
    velocity: float = 0.01
    length: float = 0.01


@dataclass(frozen=True)
class ModelConfig:
    flux: str = "upwind"  # upwind | flowrate
    tessellation: str = "hex"
    n_env: int = 9
    n_landcover: int = 16
    n_loc: int = 4
    hidden: int = 128  # encoder, decoder and MLP widths
    gat_hidden: int = 32
    gat_layers: int = 2
    mlp_layers: int = 1
    k_neighbors: int = 10
    context: int = 24
    dropout: float = 0.1
    dt: float = 1.0
    use_fluxes: bool = True  # False: local-only ablation, all fluxes zero
    scaling: Scaling = field(default_factory=Scaling)

    def __post_init__(self):
        if self.flux not in ("upwind", "flowrate"):
            raise ValueError(f"unknown flux scheme {self.flux!r}")
        for name in ("n_env", "hidden", "gat_hidden", "gat_layers", "context"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if isinstance(self.scaling, Scaling) and self.scaling.velocity != self.scaling.length:
            # flux / area is only in density units when both share one factor
            raise ValueError("velocity and length scaling factors must be equal")

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if isinstance(d.get("scaling"), dict):
            d["scaling"] = Scaling(**d["scaling"])
        return cls(**d)


@dataclass
class StaticFeatures:
    landcover: np.ndarray  # (N, 16) rows sum to one
    location: np.ndarray  # (N, 4) sinusoidal embedding in [-1, 1]
    edges: np.ndarray  # (F, 4) distance, normal x, normal y, face length (scaled)


def location_embedding(centers: np.ndarray, extent: tuple) -> np.ndarray:
    """``[sin, cos]`` of normalised x and y (the planar stand-in for lon/lat)."""
    (x0, x1), (y0, y1) = extent
    ax = np.pi * ((centers[:, 0] - x0) / (x1 - x0) - 0.5)
    ay = np.pi * ((centers[:, 1] - y0) / (y1 - y0) - 0.5)
    return np.column_stack([np.sin(ax), np.cos(ax), np.sin(ay), np.cos(ay)])


def edge_features(tess: Tessellation, length_scale: float) -> np.ndarray:
    return np.column_stack([tess.face_distance * length_scale, tess.face_normal,
                            tess.face_length * length_scale])


def make_static(tess: Tessellation, landcover: np.ndarray, scaling: Scaling = Scaling(),
                extent=None) -> StaticFeatures:
    if extent is None:
        lo, hi = tess.centers.min(axis=0), tess.centers.max(axis=0)
        pad = np.maximum(hi - lo, 1.0) * 0.1
        extent = ((lo[0] - pad[0], hi[0] + pad[0]), (lo[1] - pad[1], hi[1] + pad[1]))
    return StaticFeatures(np.asarray(landcover, dtype=float),
                          location_embedding(tess.centers, extent),
                          edge_features(tess, scaling.length))


@dataclass
class ForecastRun:
    """Numpy record of one rollout on a (possibly batched) cell graph.

    ``rho`` is (K+1, n) with the initial state first; the other fields are (K, ...).
    """

    rho: np.ndarray
    velocity: np.ndarray
    delta: np.ndarray
    gamma: np.ndarray
    source: np.ndarray
    flux: np.ndarray

    @property
    def horizon(self) -> int:
        return len(self.flux)


@dataclass
class RolloutNodes:
    rho: list
    velocity: list
    delta: list
    gamma: list
    source: list
    flux: list

    def to_run(self) -> ForecastRun:
        v = lambda xs: np.stack([x.value for x in xs]) if xs else np.zeros((0,))
        return ForecastRun(v(self.rho), v(self.velocity), v(self.delta), v(self.gamma),
                           v(self.source), v(self.flux))


class NonFiniteError(FloatingPointError):
    pass


class FluxModel:
    """Parameter layout and forward pass for one tessellation."""

    def __init__(self, config: ModelConfig, tess: Tessellation, static: StaticFeatures):
        self.config = config
        self.tess = tess
        self.static = static
        c = config
        H = c.hidden
        hid = (H,) * c.mlp_layers
        n_static = c.n_landcover + c.n_loc
        self.gat = GAT("gat", n_static, c.gat_hidden, c.gat_layers)
        self.encoder = LSTMCell("enc", 3 + c.n_env + c.gat_hidden, H)
        self.decoder = LSTMCell("dec", 1 + c.n_env + c.gat_hidden + H, H)
        self.mlp_v = MLP("mlp_v", (H + c.n_env + c.n_loc,) + hid + (2,))
        self.mlp_s = MLP("mlp_s", (H + c.n_env + c.n_loc,) + hid + (2,))
        self.mlp_a = MLP("mlp_a", (H + 2 * c.n_env + 4,) + hid + (1,))
        self.gat_src, self.gat_dst = graph_edges(tess.adjacency)
        self._graphs: dict[int, fvm.FVMGraph] = {}

    def init_params(self, rng: np.random.Generator) -> dict:
        P = {}
        P.update(self.gat.init(rng))
        P.update(self.encoder.init(rng))
        P.update(self.decoder.init(rng))
        if self.config.flux == "upwind":
            P.update(self.mlp_v.init(rng))
        else:
            P.update(self.mlp_a.init(rng))
        P.update(self.mlp_s.init(rng))
        return P

    def graph(self, batch: int) -> fvm.FVMGraph:
        if batch not in self._graphs:
            self._graphs[batch] = fvm.FVMGraph.from_tessellation(
                self.tess, self.config.scaling.length, batch)
        return self._graphs[batch]

    # -- components --------------------------------------------------------------------

    def static_embedding(self, P, batch: int) -> ad.Node:
        x = np.hstack([self.static.landcover, self.static.location])
        emb = self.gat(P, x, self.gat_src, self.gat_dst)
        N = self.tess.n_cells
        return ad.gather(emb, np.tile(np.arange(N), batch))

    def encode(self, P, pseudo: np.ndarray, env: np.ndarray, g_static: ad.Node):
        """Run the encoder over context frames.

        ``pseudo`` is (T, n, 3) scaled density/velocity pseudo-measurements and ``env``
        (T, n, D). Returns the final hidden and cell states.
        """
        n = pseudo.shape[1]
        H = self.config.hidden
        h = ad.const(np.zeros((n, H)))
        c = ad.const(np.zeros((n, H)))
        for t in range(pseudo.shape[0]):
            x = ad.concat([pseudo[t], env[t], g_static], axis=1)
            h, c = self.encoder(P, x, h, c)
        return h, c

    def _flowrates(self, P, z, u_prev, u_now, g: fvm.FVMGraph, training, rng):
        e = np.tile(self.static.edges, (g.batch, 1))
        e_rev = e.copy()
        e_rev[:, 1:3] *= -1.0
        # A_ji: fraction of cell i moving to j (upstream i), and the reverse
        x_ij = ad.concat([ad.gather(z, g.face_i), u_prev[g.face_i], u_now[g.face_j], e], axis=1)
        x_ji = ad.concat([ad.gather(z, g.face_j), u_prev[g.face_j], u_now[g.face_i], e_rev], axis=1)
        kw = dict(dropout_rate=self.config.dropout, training=training, rng=rng)
        a_out = ad.sigmoid(ad.reshape(self.mlp_a(P, x_ij, **kw), (g.n_faces,)))
        a_in = ad.sigmoid(ad.reshape(self.mlp_a(P, x_ji, **kw), (g.n_faces,)))
        return a_out, a_in

    def rollout(self, P, state, rho0, env: np.ndarray, g_static: ad.Node, horizon: int,
                batch: int = 1, training: bool = False, rng=None) -> RolloutNodes:
        """Decode ``horizon`` steps.

        ``env`` is (horizon + 1, n, D): row 0 holds the conditions at the initial time,
        row k those at forecast step k.
        """
        c = self.config
        g = self.graph(batch)
        h, cs = state
        z0 = h
        n = g.n
        rho = ad.as_node(rho0)
        loc = np.tile(self.static.location, (batch, 1))
        kw = dict(dropout_rate=c.dropout, training=training, rng=rng)
        out = RolloutNodes([rho], [], [], [], [], [])
        for k in range(1, horizon + 1):
            u = env[k]
            x = ad.concat([ad.reshape(rho, (n, 1)), u, g_static, z0], axis=1)
            h, cs = self.decoder(P, x, h, cs)
            h = fvm.apply_boundary(g, h)
            cs = fvm.apply_boundary(g, cs)
            feats = ad.concat([h, u, loc], axis=1)
            o = self.mlp_s(P, feats, **kw)
            delta = ad.square(ad.tanh(o[:, 0]))
            gamma = ad.square(o[:, 1])
            if c.flux == "upwind":
                vel = self.mlp_v(P, feats, **kw)
                if c.use_fluxes:
                    flux = fvm.graph_upwind_fluxes(g, rho, vel, c.dt)
                else:
                    flux = ad.const(np.zeros(g.n_faces))
            else:
                vel = ad.const(np.zeros((n, 2)))
                if c.use_fluxes:
                    a_out, a_in = self._flowrates(P, h, env[k - 1], u, g, training, rng)
                    flux = fvm.graph_flowrate_fluxes(g, a_out, a_in, rho)
                else:
                    flux = ad.const(np.zeros(g.n_faces))
            s = fvm.source_sink(delta, gamma, rho)
            rho = fvm.continuity_step(g, rho, flux, s)
            if not np.all(np.isfinite(rho.value)):
                raise NonFiniteError(f"non-finite density at forecast step {k}")
            out.rho.append(rho)
            out.velocity.append(vel)
            out.delta.append(delta)
            out.gamma.append(gamma)
            out.source.append(s)
            out.flux.append(flux)
        return out

    def forward(self, P, pseudo, env, rho0, horizon: int, batch: int = 1,
                training: bool = False, rng=None) -> RolloutNodes:
        """Encoder over ``pseudo``/``env[:T]`` then a rollout with ``env[T-1:]``.

        ``pseudo`` is (T, n, 3); ``env`` is (T + horizon, n, D) covering context and
        forecast times.
        """
        T = pseudo.shape[0]
        g_static = self.static_embedding(P, batch)
        state = self.encode(P, pseudo, env[:T], g_static)
        return self.rollout(P, state, rho0, env[T - 1:T + horizon], g_static, horizon,
                            batch, training, rng)


# -- data-side helpers -------------------------------------------------------------------

def fill_missing(values: np.ndarray, missing: np.ndarray, adjacency) -> np.ndarray:
    """Fill missing cells with the mean of available neighbours, sweeping until done.

    Cells with no available cell anywhere in their component are set to zero.
    """
    values = np.array(values, dtype=float)
    missing = np.array(missing, dtype=bool)
    while missing.any():
        filled = []
        for i in np.flatnonzero(missing):
            nb = [j for j in adjacency[i] if not missing[j]]
            if nb:
                filled.append((i, values[nb].mean(axis=0)))
        if not filled:
            values[missing] = 0.0
            break
        for i, v in filled:
            values[i] = v
            missing[i] = False
    return values


def initial_state(pseudo_density: np.ndarray, missing: np.ndarray, adjacency) -> np.ndarray:
    """Initial cell densities: the interpolated pseudo-density, gaps neighbour-filled."""
    return fill_missing(pseudo_density, missing, adjacency)


def predict(model: FluxModel, params: dict, pseudo, env, rho0, horizon, batch=1) -> ForecastRun:
    """Deterministic inference rollout returning numpy arrays."""
    nodes = model.forward(as_constants(params), pseudo, env, rho0, horizon, batch)
    return nodes.to_run()


# -- serialisation -----------------------------------------------------------------------

def write_run_jsonl(path, run: ForecastRun, scaling: Scaling, n_cells: int, times=None,
                    sequence: int = 0) -> None:
    """One record per (step, cell) in physical units."""
    with open(path, "a") as fh:
        for k in range(run.horizon):
            for c in range(n_cells):
                rec = {
                    "sequence": sequence,
                    "step": k + 1,
                    "cell": c,
                    "rho": float(run.rho[k + 1, c] / scaling.density),
                    "vx": float(run.velocity[k, c, 0] / scaling.velocity),
                    "vy": float(run.velocity[k, c, 1] / scaling.velocity),
                    "delta": float(run.delta[k, c]),
                    "gamma": float(run.gamma[k, c] / scaling.density),
                    "s": float(run.source[k, c] / scaling.density),
                }
                if times is not None:
                    rec["time"] = str(np.datetime64(times[k], "h")) + ":00:00Z"
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def write_faces_jsonl(path, run: ForecastRun, scaling: Scaling, face_i, face_j,
                      sequence: int = 0) -> None:
    # scaled flux -> birds per step
    fac = 1.0 / (scaling.density * scaling.length ** 2)
    with open(path, "a") as fh:
        for k in range(run.horizon):
            for f in range(len(face_i)):
                fh.write(json.dumps({"sequence": sequence, "step": k + 1, "i": int(face_i[f]),
                                     "j": int(face_j[f]), "flux": float(run.flux[k, f] * fac)},
                                    sort_keys=True) + "\n")
