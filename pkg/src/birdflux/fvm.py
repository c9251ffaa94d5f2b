"""Differentiable finite-volume kernels for the continuity equation.

Every function accepts numpy arrays or autodiff nodes and returns a node, so the
same code serves the training graph and plain numerical evaluation (read
``.value`` outside a tape). Fluxes are stored once per face, oriented along the
stored normal (lower cell index to higher), which makes them antisymmetric by
construction.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .tessellation import Tessellation, TessellationError


@dataclass(frozen=True)
class FVMGraph:
    """Flat face/cell arrays for one tessellation, optionally tiled ``batch`` times.

    Lengths are multiplied by ``length_scale`` and areas by its square.
    """

    n: int
    face_i: np.ndarray
    face_j: np.ndarray
    length: np.ndarray
    normal: np.ndarray
    area: np.ndarray
    boundary: np.ndarray
    bnd_dst: np.ndarray  # boundary cell receiving a neighbour contribution
    bnd_src: np.ndarray  # interior neighbour supplying it
    bnd_w: np.ndarray  # 1 / number of interior neighbours
    n_cells: int  # cells per tessellation copy
    batch: int = 1

    @classmethod
    def from_tessellation(cls, tess: Tessellation, length_scale: float = 1.0,
                          batch: int = 1) -> "FVMGraph":
        adj = tess.adjacency
        dst, src, w = [], [], []
        for b in np.flatnonzero(tess.boundary):
            nb = [j for j in adj[b] if not tess.boundary[j]]
            if not nb:
                raise TessellationError(f"boundary cell {b} has no interior neighbour")
            dst.extend([b] * len(nb))
            src.extend(nb)
            w.extend([1.0 / len(nb)] * len(nb))
        N, F = tess.n_cells, tess.n_faces
        offs = np.arange(batch)
        tile_idx = lambda a, n: (np.asarray(a, dtype=np.int64)[None, :] + n * offs[:, None]).ravel()
        return cls(
            n=N * batch,
            face_i=tile_idx(tess.face_i, N),
            face_j=tile_idx(tess.face_j, N),
            length=np.tile(tess.face_length * length_scale, batch),
            normal=np.tile(tess.face_normal, (batch, 1)),
            area=np.tile(tess.areas * length_scale ** 2, batch),
            boundary=np.tile(tess.boundary, batch),
            bnd_dst=tile_idx(dst, N),
            bnd_src=tile_idx(src, N),
            bnd_w=np.tile(np.asarray(w, dtype=float), batch),
            n_cells=N,
            batch=batch,
        )

    @property
    def n_faces(self) -> int:
        return len(self.face_i)

    @property
    def interior(self) -> np.ndarray:
        return ~self.boundary


# -- flux models -------------------------------------------------------------------------

def upwind_flux(rho_i, rho_j, v_i, v_j, normal, length, dt: float = 1.0) -> ad.Node:
    """Per-face upwind flux ``|f| dt (a+ rho_i + a- rho_j)`` with ``a = n . (v_i + v_j) / 2``.

    Shapes: densities and lengths (F,), velocities and normals (F, 2).
    """
    normal = ad.as_node(normal)
    vface = ad.scale(ad.add(v_i, v_j), 0.5)
    vn = ad.sum_(ad.mul(vface, normal), axis=1)
    upstream = ad.add(ad.mul(ad.relu(vn), rho_i), ad.mul(ad.minimum0(vn), rho_j))
    return ad.mul(ad.scale(ad.as_node(length), dt), upstream)


def flowrate_flux(a_ji, a_ij, rho_i, rho_j, area_i, area_j) -> ad.Node:
    """``A_ji V_i rho_i - A_ij V_j rho_j``: ``A_ji`` is the fraction of cell i moving to j."""
    return ad.sub(ad.mul(ad.mul(a_ji, area_i), rho_i), ad.mul(ad.mul(a_ij, area_j), rho_j))


def source_sink(delta, gamma, rho) -> ad.Node:
    """Net take-off minus landing: ``gamma - delta * rho``."""
    return ad.sub(gamma, ad.mul(delta, rho))


def graph_upwind_fluxes(g: FVMGraph, rho, vel, dt: float = 1.0) -> ad.Node:
    rho, vel = ad.as_node(rho), ad.as_node(vel)
    return upwind_flux(ad.gather(rho, g.face_i), ad.gather(rho, g.face_j),
                       ad.gather(vel, g.face_i), ad.gather(vel, g.face_j),
                       g.normal, g.length, dt)


def graph_flowrate_fluxes(g: FVMGraph, a_ji, a_ij, rho) -> ad.Node:
    rho = ad.as_node(rho)
    return flowrate_flux(a_ji, a_ij, ad.gather(rho, g.face_i), ad.gather(rho, g.face_j),
                         g.area[g.face_i], g.area[g.face_j])


# -- update ------------------------------------------------------------------------------

def net_outflow(g: FVMGraph, flux) -> ad.Node:
    """Per-cell sum of outgoing fluxes, ``sum_j F_{i->j}``."""
    flux = ad.as_node(flux)
    return ad.sub(ad.scatter_add(flux, g.face_i, g.n), ad.scatter_add(flux, g.face_j, g.n))


def _mask_like(mask: np.ndarray, shape) -> np.ndarray:
    m = mask.astype(float)
    return np.broadcast_to(m.reshape((-1,) + (1,) * (len(shape) - 1)), shape).copy()


def apply_boundary(g: FVMGraph, field) -> ad.Node:
    """Replace boundary-cell rows by the mean of their interior neighbours' rows."""
    field = ad.as_node(field)
    shape = field.value.shape
    kept = ad.mul(field, _mask_like(g.interior, shape))
    if len(g.bnd_dst) == 0:
        return kept
    nb = ad.gather(field, g.bnd_src)
    nb = ad.mul(nb, _mask_like(g.bnd_w, nb.value.shape))
    return ad.add(kept, ad.scatter_add(nb, g.bnd_dst, g.n))


def continuity_step(g: FVMGraph, rho, flux, s, boundary: bool = True) -> ad.Node:
    """``rho' = rho - outflow / |C| + s`` on interior cells, then the boundary rule."""
    rho = ad.as_node(rho)
    out = ad.div(net_outflow(g, flux), g.area)
    new = ad.add(ad.sub(rho, out), s)
    if not boundary:
        return new
    return apply_boundary(g, new)


# -- diagnostics -------------------------------------------------------------------------

def mass_ledger(g: FVMGraph, densities, fluxes, sources) -> list[dict]:
    """Per-step interior mass budget of a rollout.

    ``densities`` is (K+1, n), ``fluxes`` (K, F), ``sources`` (K, n). Row ``k`` holds
    the interior mass after step ``k + 1`` together with the outflow into boundary
    cells and the interior source mass of that step.
    """
    densities = np.asarray(densities)
    fluxes = np.asarray(fluxes)
    sources = np.asarray(sources)
    interior = g.interior
    to_bnd = g.boundary[g.face_j] & interior[g.face_i]
    from_bnd = g.boundary[g.face_i] & interior[g.face_j]
    rows = []
    for k in range(len(fluxes)):
        rows.append({
            "step": k + 1,
            "interior_mass": float((densities[k + 1] * g.area)[interior].sum()),
            "boundary_outflow": float(fluxes[k][to_bnd].sum() - fluxes[k][from_bnd].sum()),
            "net_source": float((sources[k] * g.area)[interior].sum()),
            "negative_cells": int((densities[k + 1] < 0).sum()),
        })
    return rows


def initial_interior_mass(g: FVMGraph, rho0) -> float:
    return float((np.asarray(rho0) * g.area)[g.interior].sum())


def ledger_residuals(g: FVMGraph, densities, rows) -> np.ndarray:
    """Relative violation of ``m(k+1) = m(k) - outflow + source`` per step."""
    prev = initial_interior_mass(g, densities[0])
    res = []
    for r in rows:
        expect = prev - r["boundary_outflow"] + r["net_source"]
        scale = max(abs(prev), abs(r["interior_mass"]), abs(r["boundary_outflow"]),
                    abs(r["net_source"]), 1e-300)
        res.append(abs(r["interior_mass"] - expect) / scale)
        prev = r["interior_mass"]
    return np.asarray(res)


def write_ledger_jsonl(path, rows) -> None:
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
