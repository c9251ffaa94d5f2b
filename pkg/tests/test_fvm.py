import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from birdflux import autodiff as ad
from birdflux import fvm
from birdflux.tessellation import (Domain, TessellationError, Tessellation,
                                   build_hex_patch, build_hex_tessellation)


def val(x):
    return np.asarray(ad.as_node(x).value)


def test_upwind_examples():
    n = np.array([[1.0, 0.0]])
    z = np.zeros((1, 2))
    assert val(fvm.upwind_flux([5.0], [99.0], z, z, n, [10.0]))[0] == 0.0
    v = np.array([[2.0, 0.0]])
    assert val(fvm.upwind_flux([5.0], [99.0], v, v, n, [10.0], dt=1.0))[0] == 100.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_upwind_antisymmetry(seed):
    rng = np.random.default_rng(seed)
    ri, rj = rng.uniform(0, 5, 1), rng.uniform(0, 5, 1)
    vi, vj = rng.normal(size=(1, 2)), rng.normal(size=(1, 2))
    ang = rng.uniform(0, 2 * np.pi)
    n = np.array([[np.cos(ang), np.sin(ang)]])
    f = fvm.upwind_flux(ri, rj, vi, vj, n, [3.0], 0.5)
    b = fvm.upwind_flux(rj, ri, vj, vi, -n, [3.0], 0.5)
    assert val(f)[0] == -val(b)[0]


def test_flowrate_examples():
    assert val(fvm.flowrate_flux(0.0, 0.0, 3.0, 4.0, 2.0, 2.0)) == 0.0
    assert val(fvm.flowrate_flux(0.5, 0.0, 3.0, 4.0, 2.0, 1.0)) == 3.0
    assert val(fvm.flowrate_flux(0.3, 0.3, 4.0, 4.0, 2.0, 2.0)) == 0.0


def test_source_sink_examples():
    assert val(fvm.source_sink(0.0, 0.0, 5.0)) == 0.0
    assert val(fvm.source_sink(1.0, 0.0, 7.0)) == -7.0
    assert val(fvm.source_sink(0.25, 2.0, 8.0)) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.floats(0, 10), st.floats(0, 100))
def test_source_sink_never_negative(delta, gamma, rho):
    assert rho + float(val(fvm.source_sink(delta, gamma, rho))) >= -1e-12


def two_cell():
    sq = lambda x0: np.array([[x0, 0], [x0 + 1, 0], [x0 + 1, 1], [x0, 1]], dtype=float)
    return Tessellation("hex", (sq(0.0), sq(1.0)), np.array([[0.5, 0.5], [1.5, 0.5]]),
                        np.array([1.0, 1.0]), np.array([0]), np.array([1]), np.array([1.0]),
                        np.array([[1.0, 0.0]]), np.array([1.0]), np.array([False, False]))


def test_identity_and_two_cell_conservation():
    g = fvm.FVMGraph.from_tessellation(two_cell())
    rho = np.array([3.0, 1.0])
    np.testing.assert_array_equal(val(fvm.continuity_step(g, rho, np.zeros(1), 0.0)), rho)
    out = val(fvm.continuity_step(g, rho, np.array([0.7]), 0.0))
    assert abs((out * g.area).sum() - (rho * g.area).sum()) <= 1e-12


def brute_force_update(tess, rho, flux, s):
    out = rho.copy()
    for c in range(tess.n_cells):
        if tess.boundary[c]:
            continue
        total = 0.0
        for j in tess.adjacency[c]:
            f, sign = tess.face_id(c, j)
            total += sign * flux[f]
        out[c] = rho[c] - total / tess.areas[c] + s[c]
    for c in np.flatnonzero(tess.boundary):
        nb = [j for j in tess.adjacency[c] if not tess.boundary[j]]
        out[c] = np.mean([out[j] for j in nb])
    return out


def test_random_hex_instance_against_ledger_oracle():
    rng = np.random.default_rng(2)
    tess = build_hex_tessellation(Domain(0, 700, 0, 600), 137.5)
    assert 15 <= tess.n_cells <= 30
    g = fvm.FVMGraph.from_tessellation(tess)
    rho = rng.uniform(0, 10, tess.n_cells)
    flux = rng.normal(size=tess.n_faces) * 100
    out = val(fvm.continuity_step(g, rho, flux, np.zeros(tess.n_cells)))
    np.testing.assert_allclose(out, brute_force_update(tess, rho, flux, np.zeros(tess.n_cells)),
                               rtol=1e-12, atol=1e-12)
    # interior mass changes only through faces touching boundary cells
    interior = ~tess.boundary
    to_bnd = sum(flux[f] if tess.boundary[tess.face_j[f]] else -flux[f]
                 for f in range(tess.n_faces)
                 if tess.boundary[tess.face_i[f]] != tess.boundary[tess.face_j[f]])
    before = (rho * tess.areas)[interior].sum()
    after = (out * tess.areas)[interior].sum()
    assert after == pytest.approx(before - to_bnd, rel=1e-12)


def test_local_conservation_without_boundary_rule(patch19, rng):
    g = fvm.FVMGraph.from_tessellation(patch19, 0.01)
    rho = rng.uniform(0, 1, g.n)
    vel = rng.normal(size=(g.n, 2))
    flux = fvm.graph_upwind_fluxes(g, rho, vel)
    out = val(fvm.continuity_step(g, rho, flux, 0.0, boundary=False))
    m0 = (rho * g.area).sum()
    assert abs((out * g.area).sum() - m0) <= 1e-12 * m0


def test_apply_boundary_examples(patch19):
    g = fvm.FVMGraph.from_tessellation(patch19)
    const = np.full(g.n, 4.0)
    np.testing.assert_allclose(val(fvm.apply_boundary(g, const)), 4.0)
    field = np.random.default_rng(0).normal(size=(g.n, 3))
    once = val(fvm.apply_boundary(g, field))
    np.testing.assert_array_equal(once[~patch19.boundary], field[~patch19.boundary])
    np.testing.assert_allclose(val(fvm.apply_boundary(g, once)), once, atol=1e-15)


def test_boundary_mean_of_two():
    tess = build_hex_patch(1)
    # make the centre cell and one rim cell interior to get a rim cell with two interior neighbours
    b = tess.boundary.copy()
    centre = int(np.argmin(np.linalg.norm(tess.centers, axis=1)))
    rim = [j for j in tess.adjacency[centre]]
    b[rim[0]] = False
    t2 = Tessellation(tess.kind, tess.cells, tess.centers.copy(), tess.areas.copy(),
                      tess.face_i.copy(), tess.face_j.copy(), tess.face_length.copy(),
                      tess.face_normal.copy(), tess.face_distance.copy(), b)
    g = fvm.FVMGraph.from_tessellation(t2)
    field = np.zeros(g.n)
    field[centre], field[rim[0]] = 2.0, 4.0
    out = val(fvm.apply_boundary(g, field))
    both = [j for j in tess.adjacency[rim[0]] if j in tess.adjacency[centre] and b[j]]
    assert out[both[0]] == pytest.approx(3.0)


def test_boundary_without_interior_neighbour_rejected():
    tess = build_hex_patch(1)
    b = np.ones(tess.n_cells, dtype=bool)
    t2 = Tessellation(tess.kind, tess.cells, tess.centers.copy(), tess.areas.copy(),
                      tess.face_i.copy(), tess.face_j.copy(), tess.face_length.copy(),
                      tess.face_normal.copy(), tess.face_distance.copy(), b)
    with pytest.raises(TessellationError):
        fvm.FVMGraph.from_tessellation(t2)


def cfl_number(g, vel, dt):
    vn = np.abs(np.einsum("fk,fk->f", 0.5 * (vel[g.face_i] + vel[g.face_j]), g.normal))
    per = np.zeros(g.n)
    np.add.at(per, g.face_i, g.length)
    np.add.at(per, g.face_j, g.length)
    return vn.max() * dt * (per / g.area).max()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_upwind_positivity(seed):
    rng = np.random.default_rng(seed)
    tess = build_hex_patch(int(rng.integers(1, 4)), 137.5)
    g = fvm.FVMGraph.from_tessellation(tess, 0.01)
    vel = rng.normal(size=(g.n, 2))
    dt = 1.0 / max(cfl_number(g, vel, 1.0), 1e-12) * rng.uniform(0.1, 1.0)
    rho = rng.uniform(0, 1, g.n)
    for _ in range(5):
        rho = val(fvm.continuity_step(g, rho, fvm.graph_upwind_fluxes(g, rho, vel, dt), 0.0))
        assert (rho >= -1e-15).all()


def rollout_ledger(g, rng, K):
    rho = rng.uniform(0, 1, g.n)
    dens, fluxes, srcs = [rho], [], []
    for _ in range(K):
        vel = rng.normal(size=(g.n, 2)) * 0.5
        delta, gamma = rng.uniform(0, 0.3, g.n), rng.uniform(0, 0.1, g.n)
        flux = val(fvm.graph_upwind_fluxes(g, rho, vel))
        s = val(fvm.source_sink(delta, gamma, rho))
        rho = val(fvm.continuity_step(g, rho, flux, s))
        dens.append(rho)
        fluxes.append(flux)
        srcs.append(s)
    return np.array(dens), np.array(fluxes), np.array(srcs)


def test_mass_ledger_identity(patch19, rng):
    g = fvm.FVMGraph.from_tessellation(patch19, 0.01)
    dens, fluxes, srcs = rollout_ledger(g, rng, 12)
    rows = fvm.mass_ledger(g, dens, fluxes, srcs)
    assert len(rows) == 12
    assert max(fvm.ledger_residuals(g, dens, rows)) <= 1e-9
    # brute-force recomputation of the outflow column
    for k, r in enumerate(rows):
        out = 0.0
        for f in range(g.n_faces):
            i, j = g.face_i[f], g.face_j[f]
            if not g.boundary[i] and g.boundary[j]:
                out += fluxes[k][f]
            elif g.boundary[i] and not g.boundary[j]:
                out -= fluxes[k][f]
        assert r["boundary_outflow"] == pytest.approx(out, rel=1e-12, abs=1e-15)


def test_ledger_pure_source_increases(patch19):
    g = fvm.FVMGraph.from_tessellation(patch19, 0.01)
    rho = np.zeros(g.n)
    dens, fl, sr = [rho], [], []
    for _ in range(4):
        s = val(fvm.source_sink(np.zeros(g.n), np.full(g.n, 0.2), rho))
        flux = val(fvm.graph_upwind_fluxes(g, rho, np.zeros((g.n, 2))))
        rho = val(fvm.continuity_step(g, rho, flux, s))
        dens.append(rho)
        fl.append(flux)
        sr.append(s)
    masses = [r["interior_mass"] for r in fvm.mass_ledger(g, dens, fl, sr)]
    assert all(b > a for a, b in zip(masses, masses[1:]))
    assert masses[0] > 0


def test_ledger_closed_system():
    from birdflux.tessellation import build_hex_torus
    tess = build_hex_torus(4, 4, 100.0)
    g = fvm.FVMGraph.from_tessellation(tess, 0.01)
    rng = np.random.default_rng(3)
    rho = rng.uniform(0, 1, g.n)
    dens, fl, sr = [rho], [], []
    for _ in range(5):
        flux = val(fvm.graph_upwind_fluxes(g, rho, rng.normal(size=(g.n, 2)) * 0.2))
        rho = val(fvm.continuity_step(g, rho, flux, 0.0))
        dens.append(rho)
        fl.append(flux)
        sr.append(np.zeros(g.n))
    m0 = (dens[0] * g.area).sum()
    for r in fvm.mass_ledger(g, dens, fl, sr):
        assert r["interior_mass"] == pytest.approx(m0, rel=1e-12)


def test_ledger_jsonl(tmp_path, patch7, rng):
    g = fvm.FVMGraph.from_tessellation(patch7, 0.01)
    rows = fvm.mass_ledger(g, *rollout_ledger(g, rng, 3))
    fvm.write_ledger_jsonl(tmp_path / "l.jsonl", rows)
    import json
    recs = [json.loads(x) for x in open(tmp_path / "l.jsonl")]
    assert set(recs[0]) == {"step", "interior_mass", "boundary_outflow", "net_source",
                            "negative_cells"}


def test_batched_graph_matches_single(patch7, rng):
    g1 = fvm.FVMGraph.from_tessellation(patch7, 0.01)
    g3 = fvm.FVMGraph.from_tessellation(patch7, 0.01, batch=3)
    rho = rng.uniform(0, 1, (3, g1.n))
    vel = rng.normal(size=(3, g1.n, 2))
    big = val(fvm.continuity_step(g3, rho.ravel(), fvm.graph_upwind_fluxes(
        g3, rho.ravel(), vel.reshape(-1, 2)), 0.0)).reshape(3, -1)
    for b in range(3):
        one = val(fvm.continuity_step(g1, rho[b], fvm.graph_upwind_fluxes(g1, rho[b], vel[b]), 0.0))
        np.testing.assert_allclose(big[b], one, rtol=1e-14, atol=1e-15)
