import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from birdflux.tessellation import (Domain, SizingError, Tessellation, TessellationError,
                                   build_hex_patch, build_hex_tessellation, build_hex_torus,
                                   build_voronoi_tessellation, face_geometry, hex_area,
                                   permute, polygon_area)


def regular_hex_area(d):
    # six equilateral triangles of side d/2
    s = d / 2
    return 6 * math.sqrt(3) / 4 * s * s


def test_hex_area_closed_form():
    tess = build_hex_tessellation(Domain(0, 1000, 0, 1000), 137.5)
    expected = regular_hex_area(137.5)
    assert expected == pytest.approx(12279.97, abs=0.01)
    np.testing.assert_allclose(tess.areas, expected, rtol=1e-9)
    assert hex_area(137.5) == pytest.approx(expected, rel=1e-12)


def test_partition_property():
    tess = build_hex_tessellation(Domain(0, 1500, 0, 900), 100.0)
    total = sum(polygon_area(c) for c in tess.cells)
    assert total == pytest.approx(tess.n_cells * regular_hex_area(100.0), rel=1e-9)


def test_interior_cells_have_six_neighbours():
    for d in (90.0, 137.5, 200.0):
        tess = build_hex_tessellation(Domain(0, 1200, -300, 700), d)
        adj = tess.adjacency
        for i in np.flatnonzero(~tess.boundary):
            assert len(adj[i]) == 6
        assert tess.boundary.any()


def test_whole_hexagons_inside_domain():
    dom = Domain(0, 1000, 0, 800)
    tess = build_hex_tessellation(dom, 137.5)
    for poly in tess.cells:
        assert poly[:, 0].min() >= dom.x_min - 1e-9 and poly[:, 0].max() <= dom.x_max + 1e-9
        assert poly[:, 1].min() >= dom.y_min - 1e-9 and poly[:, 1].max() <= dom.y_max + 1e-9


def test_paper_scale_cell_count():
    tess = build_hex_tessellation(Domain(0, 4600, 0, 2900), 137.5)
    assert abs(tess.n_cells - 1091) <= 0.15 * 1091


def test_sizing_errors():
    with pytest.raises(SizingError):
        build_hex_tessellation(Domain(0, 200, 0, 200), 137.5)
    with pytest.raises(SizingError):
        build_hex_tessellation(Domain(0, 1000, 0, 1000), -1.0)
    with pytest.raises(ValueError):
        Domain(1, 0, 0, 1)


def test_patch_counts_and_boundary():
    for n, cells in ((1, 7), (2, 19), (3, 37), (6, 127)):
        tess = build_hex_patch(n, 137.5)
        assert tess.n_cells == cells
        assert tess.boundary.sum() == 6 * n
    tess = build_hex_patch(2)
    tess.validate_boundary()


def test_face_geometry_east_neighbour(patch7):
    centre = int(np.argmin(np.linalg.norm(patch7.centers, axis=1)))
    east = int(np.argmax(patch7.centers[:, 0]))
    length, normal, dist = face_geometry(patch7, centre, east)
    np.testing.assert_allclose(normal, [1.0, 0.0], atol=1e-12)
    assert length == pytest.approx(137.5 / 2, rel=1e-12)
    assert dist == pytest.approx(math.sqrt(3) * 137.5 / 2, rel=1e-12)
    _, back, _ = face_geometry(patch7, east, centre)
    np.testing.assert_array_equal(back, -normal)


def test_face_geometry_non_adjacent(patch19):
    adj = patch19.adjacency
    far = next(j for j in range(patch19.n_cells) if j not in adj[0] and j != 0)
    with pytest.raises(KeyError):
        face_geometry(patch19, 0, far)


def test_faces_unique_and_ordered(patch19):
    pairs = list(zip(patch19.face_i.tolist(), patch19.face_j.tolist()))
    assert len(set(pairs)) == len(pairs)
    assert all(i < j for i, j in pairs)
    np.testing.assert_allclose(np.linalg.norm(patch19.face_normal, axis=1), 1.0, atol=1e-12)


def closure_ok(tess, cells):
    res = np.linalg.norm(tess.closure_residual(), axis=1)
    per = tess.perimeters()
    return all(res[c] <= 1e-9 * per[c] for c in cells)


def test_closure_hex():
    tess = build_hex_tessellation(Domain(0, 1400, 0, 1100), 137.5)
    assert closure_ok(tess, np.flatnonzero(~tess.boundary))


def test_torus_closed_everywhere():
    tess = build_hex_torus(6, 6, 100.0)
    assert not tess.boundary.any()
    assert all(len(a) == 6 for a in tess.adjacency)
    assert closure_ok(tess, range(tess.n_cells))


def test_json_round_trip(patch19):
    again = Tessellation.from_json(patch19.to_json())
    assert again.to_json() == patch19.to_json()
    np.testing.assert_array_equal(again.face_normal, patch19.face_normal)
    np.testing.assert_array_equal(again.areas, patch19.areas)


def test_voronoi_unit_square():
    seeds = [(0, 0), (1, 0), (1, 1), (0, 1)]
    tess = build_voronoi_tessellation(seeds, buffer_km=1.0, n_dummy=8)
    assert tess.n_cells == 12
    assert tess.boundary.sum() == 8
    assert (~tess.boundary).sum() == 4
    np.testing.assert_allclose(tess.sites[:4], seeds)


def test_voronoi_paper_configuration():
    seeds = np.random.default_rng(7).uniform([0, 0], [4600, 2900], size=(143, 2))
    tess = build_voronoi_tessellation(seeds, 450.0, 60)
    assert tess.n_cells == 203
    assert tess.boundary.sum() == 60
    assert (tess.areas > 0).all()
    tess.validate_boundary()


def test_voronoi_rejects_degenerate():
    with pytest.raises(TessellationError):
        build_voronoi_tessellation([(0, 0), (1, 1), (2, 2)], 1.0, 8)
    with pytest.raises(TessellationError):
        build_voronoi_tessellation([(0, 0), (1, 0), (0, 1), (1, 0)], 1.0, 8)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(4, 25))
def test_voronoi_nearest_seed_property(seed, n):
    rng = np.random.default_rng(seed)
    seeds = rng.uniform(0, 1000, size=(n, 2))
    if np.min(np.linalg.norm(seeds[:, None] - seeds[None], axis=-1) + np.eye(n) * 1e9) < 1.0:
        return
    tess = build_voronoi_tessellation(seeds, 200.0, 16)
    for c in range(tess.n_cells):
        poly = tess.cells[c]
        w = rng.dirichlet(np.ones(len(poly)), size=5)
        pts = w @ poly  # convex combinations lie inside the convex cell
        d = np.linalg.norm(pts[:, None] - tess.sites[None], axis=-1)
        own = d[:, c]
        assert np.all(own <= d.min(axis=1) + 1e-6)
    interior = [c for c in np.flatnonzero(~tess.boundary)]
    assert closure_ok(tess, interior)


def test_permute_relabels(patch19):
    perm = np.random.default_rng(3).permutation(patch19.n_cells)
    p = permute(patch19, perm)
    np.testing.assert_allclose(p.centers, patch19.centers[perm])
    np.testing.assert_array_equal(p.boundary, patch19.boundary[perm])
    assert p.n_faces == patch19.n_faces
