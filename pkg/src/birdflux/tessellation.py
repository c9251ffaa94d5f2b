"""Planar tessellations (hexagonal grids and clipped Voronoi diagrams) and their dual graphs.

All coordinates are planar kilometres. A :class:`Tessellation` is immutable after
construction; faces are stored once per unordered cell pair with the normal
pointing from the lower to the higher cell index.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import Delaunay

SQRT3 = math.sqrt(3.0)

# axial neighbour offsets for pointy-top hexagons; (1, 0) is due east
_AXIAL_DIRS = ((1, 0), (0, 1), (-1, 1), (-1, 0), (0, -1), (1, -1))


class TessellationError(ValueError):
    pass


class SizingError(TessellationError):
    pass


@dataclass(frozen=True)
class Domain:
    x_min: float
    x_max: float
    y_min: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"empty domain {self}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min


@dataclass(frozen=True, eq=False)
class Tessellation:
    kind: str
    cells: tuple  # per-cell (n_vertices, 2) arrays, counter-clockwise
    centers: np.ndarray
    areas: np.ndarray
    face_i: np.ndarray
    face_j: np.ndarray
    face_length: np.ndarray
    face_normal: np.ndarray
    face_distance: np.ndarray
    boundary: np.ndarray  # bool mask
    sites: np.ndarray = None  # generating points (voronoi seeds); centers otherwise
    _face_lookup: dict = field(default=None, repr=False)

    def __post_init__(self):
        if self.sites is None:
            object.__setattr__(self, "sites", self.centers)
        lookup = {}
        for f, (i, j) in enumerate(zip(self.face_i.tolist(), self.face_j.tolist())):
            lookup[(i, j)] = f
        object.__setattr__(self, "_face_lookup", lookup)
        for arr in (self.centers, self.areas, self.face_i, self.face_j, self.face_length,
                    self.face_normal, self.face_distance, self.boundary, self.sites):
            arr.setflags(write=False)

    @property
    def n_cells(self) -> int:
        return len(self.areas)

    @property
    def n_faces(self) -> int:
        return len(self.face_i)

    @property
    def interior(self) -> np.ndarray:
        return ~self.boundary

    @property
    def adjacency(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in range(self.n_cells)]
        for i, j in zip(self.face_i.tolist(), self.face_j.tolist()):
            adj[i].append(j)
            adj[j].append(i)
        return [sorted(a) for a in adj]

    def face_id(self, i: int, j: int) -> tuple[int, float]:
        """Index of the face between ``i`` and ``j`` and the orientation sign seen from ``i``."""
        key = (min(i, j), max(i, j))
        if key not in self._face_lookup:
            raise KeyError(f"cells {i} and {j} are not adjacent")
        return self._face_lookup[key], (1.0 if i < j else -1.0)

    def perimeters(self) -> np.ndarray:
        out = np.zeros(self.n_cells)
        np.add.at(out, self.face_i, self.face_length)
        np.add.at(out, self.face_j, self.face_length)
        return out

    def closure_residual(self) -> np.ndarray:
        """Per-cell sum of length-weighted outward face normals."""
        res = np.zeros((self.n_cells, 2))
        w = self.face_length[:, None] * self.face_normal
        np.add.at(res, self.face_i, w)
        np.add.at(res, self.face_j, -w)
        return res

    def validate_boundary(self) -> None:
        adj = self.adjacency
        for b in np.flatnonzero(self.boundary):
            if not any(not self.boundary[j] for j in adj[b]):
                raise TessellationError(f"boundary cell {b} has no interior neighbour")

    # -- serialisation -------------------------------------------------------------------

    def to_dict(self) -> dict:
        adj = self.adjacency
        cells = []
        for c in range(self.n_cells):
            cells.append({
                "id": c,
                "center": [float(v) for v in self.centers[c]],
                "site": [float(v) for v in self.sites[c]],
                "area": float(self.areas[c]),
                "vertices": [[float(x), float(y)] for x, y in self.cells[c]],
                "neighbors": adj[c],
                "is_boundary": bool(self.boundary[c]),
            })
        faces = []
        for f in range(self.n_faces):
            faces.append({
                "i": int(self.face_i[f]),
                "j": int(self.face_j[f]),
                "length": float(self.face_length[f]),
                "normal": [float(v) for v in self.face_normal[f]],
                "distance": float(self.face_distance[f]),
            })
        return {"kind": self.kind, "cells": cells, "faces": faces}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, doc: dict) -> "Tessellation":
        cells = doc["cells"]
        faces = doc["faces"]
        return cls(
            kind=doc["kind"],
            cells=tuple(np.asarray(c["vertices"], dtype=float).reshape(-1, 2) for c in cells),
            centers=np.asarray([c["center"] for c in cells], dtype=float),
            areas=np.asarray([c["area"] for c in cells], dtype=float),
            face_i=np.asarray([f["i"] for f in faces], dtype=np.int64),
            face_j=np.asarray([f["j"] for f in faces], dtype=np.int64),
            face_length=np.asarray([f["length"] for f in faces], dtype=float),
            face_normal=np.asarray([f["normal"] for f in faces], dtype=float).reshape(-1, 2),
            face_distance=np.asarray([f["distance"] for f in faces], dtype=float),
            boundary=np.asarray([c["is_boundary"] for c in cells], dtype=bool),
            sites=np.asarray([c.get("site", c["center"]) for c in cells], dtype=float),
        )

    @classmethod
    def from_json(cls, text: str) -> "Tessellation":
        return cls.from_dict(json.loads(text))


def face_geometry(tess: Tessellation, i: int, j: int) -> tuple[float, np.ndarray, float]:
    """Return ``(length, normal pointing out of i, centre distance)`` for adjacent cells."""
    f, sign = tess.face_id(i, j)
    return float(tess.face_length[f]), sign * tess.face_normal[f], float(tess.face_distance[f])


# -- geometry helpers --------------------------------------------------------------------

def polygon_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def polygon_centroid(poly: np.ndarray) -> np.ndarray:
    x, y = poly[:, 0], poly[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    a = 0.5 * cross.sum()
    return np.array([((x + xn) * cross).sum(), ((y + yn) * cross).sum()]) / (6.0 * a)


def clip_halfplane(poly: np.ndarray, point: np.ndarray, normal: np.ndarray) -> np.ndarray:
    """Keep the part of a convex polygon where ``(x - point) . normal <= 0``."""
    if len(poly) == 0:
        return poly
    d = (poly - point) @ normal
    out = []
    n = len(poly)
    for k in range(n):
        p, q = poly[k], poly[(k + 1) % n]
        dp, dq = d[k], d[(k + 1) % n]
        if dp <= 0:
            out.append(p)
        if (dp < 0 < dq) or (dq < 0 < dp):
            t = dp / (dp - dq)
            out.append(p + t * (q - p))
    return np.asarray(out).reshape(-1, 2)


def hex_vertices(center: Sequence[float], circumradius: float) -> np.ndarray:
    ang = np.deg2rad(30.0 + 60.0 * np.arange(6))
    return np.column_stack([center[0] + circumradius * np.cos(ang),
                            center[1] + circumradius * np.sin(ang)])


def hex_area(cell_diameter_km: float) -> float:
    return 3.0 * SQRT3 / 8.0 * cell_diameter_km ** 2


# -- hexagonal grids ---------------------------------------------------------------------

def _hex_from_axial(axial: list[tuple[int, int]], centers: np.ndarray, d: float,
                    kind: str, boundary_rule: str, wrap=None) -> Tessellation:
    R = d / 2.0
    index = {a: n for n, a in enumerate(axial)}
    fi, fj, fn = [], [], []
    n_nb = np.zeros(len(axial), dtype=int)
    for n, (q, r) in enumerate(axial):
        for dq, dr in _AXIAL_DIRS:
            nb = (q + dq, r + dr)
            if wrap is not None:
                nb = wrap(*nb)
            m = index.get(nb)
            if m is None or m == n:
                continue
            n_nb[n] += 1
            if n < m:
                vec = np.array([SQRT3 * (dq + dr / 2.0), 1.5 * dr])
                fi.append(n)
                fj.append(m)
                fn.append(vec / np.linalg.norm(vec))
    face_i = np.asarray(fi, dtype=np.int64)
    face_j = np.asarray(fj, dtype=np.int64)
    if boundary_rule == "none":
        boundary = np.zeros(len(axial), dtype=bool)
    else:
        boundary = n_nb < 6
    cells = tuple(hex_vertices(c, R) for c in centers)
    areas = np.array([polygon_area(p) for p in cells])
    nf = len(face_i)
    return Tessellation(
        kind=kind,
        cells=cells,
        centers=np.asarray(centers, dtype=float),
        areas=areas,
        face_i=face_i,
        face_j=face_j,
        face_length=np.full(nf, R),
        face_normal=np.asarray(fn, dtype=float).reshape(-1, 2),
        face_distance=np.full(nf, SQRT3 * R),
        boundary=boundary,
    )


def _prune_isolated_boundary(axial, centers):
    """Drop rim cells (fewer than 6 neighbours) that touch no full-degree cell."""
    index = set(axial)

    def degree(a):
        return sum((a[0] + dq, a[1] + dr) in index for dq, dr in _AXIAL_DIRS)

    full = {a for a in axial if degree(a) == 6}
    keep = [n for n, a in enumerate(axial)
            if a in full or any((a[0] + dq, a[1] + dr) in full for dq, dr in _AXIAL_DIRS)]
    return [axial[n] for n in keep], centers[keep]


def build_hex_tessellation(domain: Domain, cell_diameter_km: float = 137.5) -> Tessellation:
    """Regular pointy-top hexagonal grid keeping only whole hexagons inside ``domain``.

    ``cell_diameter_km`` is the vertex-to-vertex diameter. Cells with fewer than six
    neighbours form the boundary set; rim cells with no interior neighbour (grid
    corners) are dropped so the neighbour-mean boundary rule is always defined.
    """
    if cell_diameter_km <= 0:
        raise SizingError("cell diameter must be positive")
    R = cell_diameter_km / 2.0
    w = SQRT3 * R
    if domain.width < 2 * w or domain.height < 2 * cell_diameter_km:
        raise SizingError(f"domain {domain} is narrower than two cells of diameter {cell_diameter_km}")
    axial, centers = [], []
    row = 0
    while True:
        y = domain.y_min + R + 1.5 * R * row
        if y + R > domain.y_max + 1e-9 * R:
            break
        col = 0
        while True:
            x = domain.x_min + w / 2.0 + w * (col + 0.5 * (row & 1))
            if x + w / 2.0 > domain.x_max + 1e-9 * R:
                break
            axial.append((col - (row - (row & 1)) // 2, row))
            centers.append((x, y))
            col += 1
        row += 1
    axial, centers = _prune_isolated_boundary(axial, np.asarray(centers, dtype=float).reshape(-1, 2))
    if len(axial) < 4:
        raise SizingError(f"only {len(axial)} cells fit; need at least 4")
    return _hex_from_axial(axial, centers, cell_diameter_km, "hex", "rim")


def build_hex_patch(n_rings: int, cell_diameter_km: float = 137.5,
                    center: Sequence[float] = (0.0, 0.0)) -> Tessellation:
    """Hexagon-shaped patch of ``1 + 3 n (n + 1)`` cells; the outermost ring is the boundary."""
    if n_rings < 1:
        raise SizingError("a patch needs at least one ring")
    R = cell_diameter_km / 2.0
    axial = []
    for q in range(-n_rings, n_rings + 1):
        for r in range(max(-n_rings, -q - n_rings), min(n_rings, -q + n_rings) + 1):
            axial.append((q, r))
    axial.sort(key=lambda a: (a[1], a[0]))
    centers = np.array([[center[0] + SQRT3 * R * (q + r / 2.0), center[1] + 1.5 * R * r]
                        for q, r in axial])
    return _hex_from_axial(axial, centers, cell_diameter_km, "hex", "rim")


def build_hex_torus(n_cols: int, n_rows: int, cell_diameter_km: float) -> Tessellation:
    """Doubly periodic hexagonal grid (no boundary cells). ``n_rows`` must be even."""
    if n_rows % 2 or n_rows < 4 or n_cols < 3:
        raise SizingError("torus needs an even row count >= 4 and at least 3 columns")
    R = cell_diameter_km / 2.0
    w = SQRT3 * R
    axial, centers, offset = [], [], {}
    for row in range(n_rows):
        for col in range(n_cols):
            q = col - (row - (row & 1)) // 2
            offset[(q, row)] = (col, row)
            axial.append((q, row))
            centers.append((w / 2.0 + w * (col + 0.5 * (row & 1)), R + 1.5 * R * row))

    def wrap(q, r):
        rr = r % n_rows
        col = q + (r - (r & 1)) // 2
        cc = col % n_cols
        return (cc - (rr - (rr & 1)) // 2, rr)

    tess = _hex_from_axial(axial, np.asarray(centers), cell_diameter_km, "hex_torus", "none", wrap)
    return tess


def torus_period(n_cols: int, n_rows: int, cell_diameter_km: float) -> tuple[float, float]:
    R = cell_diameter_km / 2.0
    return n_cols * SQRT3 * R, n_rows * 1.5 * R


# -- voronoi -----------------------------------------------------------------------------

def _convex_hull_buffer(points: np.ndarray, buffer_km: float):
    from shapely.geometry import MultiPoint

    return MultiPoint([tuple(p) for p in points]).convex_hull.buffer(buffer_km, quad_segs=16)


def build_voronoi_tessellation(seeds, buffer_km: float = 450.0, n_dummy: int = 60) -> Tessellation:
    """Voronoi diagram of ``seeds`` plus dummy seeds on the buffered convex hull.

    Cells are clipped to the buffered hull. Real seed ``m`` owns cell ``m``; the
    ``n_dummy`` dummy cells follow and make up the boundary set.
    """
    seeds = np.asarray(seeds, dtype=float).reshape(-1, 2)
    if len(seeds) < 3:
        raise TessellationError("need at least 3 seeds")
    if buffer_km <= 0:
        raise TessellationError("buffer must be positive")
    if len(np.unique(seeds, axis=0)) != len(seeds):
        raise TessellationError("duplicate seeds")
    rel = seeds - seeds[0]
    scale = np.abs(rel).max()
    cross = rel[1:, 0, None] * rel[None, 1:, 1] - rel[1:, 1, None] * rel[None, 1:, 0]
    if np.abs(cross).max() <= 1e-12 * scale ** 2:
        raise TessellationError("seeds are collinear; the hull is degenerate")

    hull = _convex_hull_buffer(seeds, buffer_km)
    ring = hull.exterior
    perim = ring.length
    dummies = np.array([ring.interpolate(k * perim / n_dummy).coords[0] for k in range(n_dummy)])
    dummies = dummies.reshape(-1, 2)
    sites = np.vstack([seeds, dummies])
    clip = np.asarray(hull.exterior.coords)[:-1]
    if polygon_area(clip) < 0:
        clip = clip[::-1]

    tri = Delaunay(sites)
    pairs = set()
    for simplex in tri.simplices:
        for a in range(3):
            i, j = int(simplex[a]), int(simplex[(a + 1) % 3])
            pairs.add((min(i, j), max(i, j)))
    nbrs = [[] for _ in range(len(sites))]
    for i, j in pairs:
        nbrs[i].append(j)
        nbrs[j].append(i)

    cells = []
    for i, s in enumerate(sites):
        poly = clip.copy()
        for j in nbrs[i]:
            u = sites[j] - s
            poly = clip_halfplane(poly, 0.5 * (s + sites[j]), u)
        cells.append(poly)

    span = float(np.ptp(sites, axis=0).max())
    fi, fj, fl, fn, fd = [], [], [], [], []
    for i, j in sorted(pairs):
        u = sites[j] - sites[i]
        dist = float(np.linalg.norm(u))
        u = u / dist
        mid = 0.5 * (sites[i] + sites[j])
        on = cells[i][np.abs((cells[i] - mid) @ u) < 1e-9 * span]
        if len(on) < 2:
            continue
        t = on @ np.array([-u[1], u[0]])
        length = float(t.max() - t.min())
        if length <= 1e-9 * span:
            continue
        fi.append(i)
        fj.append(j)
        fl.append(length)
        fn.append(u)
        fd.append(dist)
    areas = np.array([polygon_area(p) for p in cells])
    boundary = np.zeros(len(sites), dtype=bool)
    boundary[len(seeds):] = True
    return Tessellation(
        kind="voronoi",
        cells=tuple(cells),
        centers=np.array([polygon_centroid(p) for p in cells]),
        areas=areas,
        face_i=np.asarray(fi, dtype=np.int64),
        face_j=np.asarray(fj, dtype=np.int64),
        face_length=np.asarray(fl, dtype=float),
        face_normal=np.asarray(fn, dtype=float).reshape(-1, 2),
        face_distance=np.asarray(fd, dtype=float),
        boundary=boundary,
        sites=sites,
    )


def permute(tess: Tessellation, perm: Sequence[int]) -> Tessellation:
    """Relabel cells so that new cell ``k`` is old cell ``perm[k]``."""
    perm = np.asarray(perm, dtype=np.int64)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    i, j = inv[tess.face_i], inv[tess.face_j]
    flip = i > j
    normal = np.where(flip[:, None], -tess.face_normal, tess.face_normal)
    lo, hi = np.minimum(i, j), np.maximum(i, j)
    order = np.lexsort((hi, lo))
    return Tessellation(
        kind=tess.kind,
        cells=tuple(tess.cells[p] for p in perm),
        centers=tess.centers[perm].copy(),
        areas=tess.areas[perm].copy(),
        face_i=lo[order],
        face_j=hi[order],
        face_length=tess.face_length[order].copy(),
        face_normal=normal[order],
        face_distance=tess.face_distance[order].copy(),
        boundary=tess.boundary[perm].copy(),
        sites=tess.sites[perm].copy(),
    )
