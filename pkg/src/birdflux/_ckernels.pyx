# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled finite-volume kernels. Mirrors ``_pykernels`` exactly (same signatures)."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def scatter_add_rows(const double[:, ::1] src, const long[::1] index, Py_ssize_t n):
    cdef Py_ssize_t e, d, r
    cdef Py_ssize_t E = src.shape[0], D = src.shape[1]
    out = np.zeros((n, D), dtype=np.float64)
    cdef double[:, ::1] o = out
    for e in range(E):
        r = index[e]
        for d in range(D):
            o[r, d] += src[e, d]
    return out


def upwind_flux(const double[::1] rho, const double[::1] vn, const long[::1] face_i,
                const long[::1] face_j, const double[::1] length, double dt):
    cdef Py_ssize_t f, F = vn.shape[0]
    out = np.empty(F, dtype=np.float64)
    cdef double[::1] o = out
    cdef double a
    for f in range(F):
        a = vn[f]
        if a > 0:
            o[f] = dt * length[f] * a * rho[face_i[f]]
        else:
            o[f] = dt * length[f] * a * rho[face_j[f]]
    return out


def divergence(const double[::1] flux, const long[::1] face_i, const long[::1] face_j,
               Py_ssize_t n):
    cdef Py_ssize_t f
    out = np.zeros(n, dtype=np.float64)
    cdef double[::1] o = out
    for f in range(flux.shape[0]):
        o[face_i[f]] += flux[f]
        o[face_j[f]] -= flux[f]
    return out


def advect_hours(const double[::1] rho0, const long[::1] face_i, const long[::1] face_j,
                 const double[::1] length, const double[::1] area,
                 const unsigned char[::1] boundary, const long[::1] bnd_cells,
                 const long[::1] bnd_ptr, const long[::1] bnd_idx,
                 const double[:, ::1] vn, const double[:, ::1] gamma,
                 const double[:, ::1] delta, const unsigned char[::1] reset,
                 int substeps, double dt):
    cdef Py_ssize_t N = rho0.shape[0], F = face_i.shape[0], H = vn.shape[0]
    cdef Py_ssize_t h, s, f, c, i, j, b, k
    cdef double a, fl, src, acc, mass
    traj = np.empty((H + 1, N), dtype=np.float64)
    srcs = np.zeros((H, N), dtype=np.float64)
    ledger = np.zeros((H, 4), dtype=np.float64)
    cdef double[:, ::1] tr = traj
    cdef double[:, ::1] sr = srcs
    cdef double[:, ::1] lg = ledger
    rho_a = np.array(rho0, dtype=np.float64)
    div_a = np.empty(N, dtype=np.float64)
    cdef double[::1] rho = rho_a
    cdef double[::1] div = div_a
    for c in range(N):
        tr[0, c] = rho[c]
    for h in range(H):
        for s in range(substeps):
            for c in range(N):
                div[c] = 0.0
            for f in range(F):
                i = face_i[f]
                j = face_j[f]
                a = vn[h, f]
                if a > 0:
                    fl = dt * length[f] * a * rho[i]
                else:
                    fl = dt * length[f] * a * rho[j]
                div[i] += fl
                div[j] -= fl
                if boundary[j] and not boundary[i]:
                    lg[h, 1] += fl
                elif boundary[i] and not boundary[j]:
                    lg[h, 1] -= fl
            for c in range(N):
                if boundary[c]:
                    continue
                src = dt * (gamma[h, c] - delta[h, c] * rho[c])
                sr[h, c] += src
                lg[h, 2] += src * area[c]
                rho[c] = rho[c] - div[c] / area[c] + src
            for b in range(bnd_cells.shape[0]):
                acc = 0.0
                for k in range(bnd_ptr[b], bnd_ptr[b + 1]):
                    acc += rho[bnd_idx[k]]
                rho[bnd_cells[b]] = acc / (bnd_ptr[b + 1] - bnd_ptr[b])
        if reset[h]:
            mass = 0.0
            for c in range(N):
                if not boundary[c]:
                    mass += rho[c] * area[c]
                rho[c] = 0.0
            lg[h, 3] = mass
        mass = 0.0
        for c in range(N):
            tr[h + 1, c] = rho[c]
            if not boundary[c]:
                mass += rho[c] * area[c]
        lg[h, 0] = mass
    return traj, srcs, ledger
