"""Kernel backend selection.

The compiled Cython module is used when it imports; otherwise the numpy versions
are used. Set ``BIRDFLUX_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels
if os.environ.get("BIRDFLUX_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _idx(a):
    return np.ascontiguousarray(a, dtype=np.int_)


def _u8(a):
    return np.ascontiguousarray(a, dtype=np.uint8)


def scatter_add_rows(src, index, n, impl=None):
    """Sum rows of ``src`` into ``n`` buckets given by ``index``, in index order."""
    impl = impl or _impl
    src = np.asarray(src, dtype=np.float64)
    flat = src.reshape(len(src), -1)
    out = impl.scatter_add_rows(_f64(flat), _idx(index), int(n))
    return out.reshape((int(n),) + src.shape[1:])


def upwind_flux(rho, vn, face_i, face_j, length, dt, impl=None):
    impl = impl or _impl
    return impl.upwind_flux(_f64(rho), _f64(vn), _idx(face_i), _idx(face_j), _f64(length),
                            float(dt))


def divergence(flux, face_i, face_j, n, impl=None):
    impl = impl or _impl
    return impl.divergence(_f64(flux), _idx(face_i), _idx(face_j), int(n))


def boundary_csr(boundary, adjacency):
    """(cells, ptr, idx) listing the interior neighbours of every boundary cell."""
    cells = np.flatnonzero(boundary)
    ptr, idx = [0], []
    for b in cells:
        nb = [j for j in adjacency[b] if not boundary[j]]
        idx.extend(nb)
        ptr.append(len(idx))
    return _idx(cells), _idx(ptr), _idx(idx)


def advect_hours(rho0, tess, vn, gamma, delta, reset, substeps, dt, impl=None):
    """Run ``substeps`` explicit upwind steps per hour with hourly face velocities.

    ``vn`` is (hours, faces) normal velocity; ``gamma``/``delta`` are (hours, cells)
    take-off rate and landing rate per hour. Returns ``(trajectory, sources, ledger)``
    where ledger columns are interior mass, boundary outflow, net source and reset mass.
    """
    impl = impl or _impl
    cells, ptr, idx = boundary_csr(tess.boundary, tess.adjacency)
    return impl.advect_hours(
        _f64(rho0), _idx(tess.face_i), _idx(tess.face_j), _f64(tess.face_length),
        _f64(tess.areas), _u8(tess.boundary), cells, ptr, idx,
        _f64(vn), _f64(gamma), _f64(delta), _u8(reset), int(substeps), float(dt))
