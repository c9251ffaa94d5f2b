"""Pure numpy versions of the compiled kernels in ``_ckernels.pyx``."""
import numpy as np


def scatter_add_rows(src, index, n):
    out = np.zeros((n, src.shape[1]))
    np.add.at(out, index, src)
    return out


def upwind_flux(rho, vn, face_i, face_j, length, dt):
    up = np.where(vn > 0, rho[face_i], rho[face_j])
    return dt * length * vn * up


def divergence(flux, face_i, face_j, n):
    return np.bincount(face_i, flux, minlength=n) - np.bincount(face_j, flux, minlength=n)


def advect_hours(rho0, face_i, face_j, length, area, boundary, bnd_cells, bnd_ptr, bnd_idx,
                 vn, gamma, delta, reset, substeps, dt):
    n = len(rho0)
    hours = vn.shape[0]
    boundary = boundary.astype(bool)
    interior = ~boundary
    to_bnd = boundary[face_j] & interior[face_i]
    from_bnd = boundary[face_i] & interior[face_j]
    counts = np.diff(bnd_ptr)
    owner = np.repeat(np.arange(len(bnd_cells)), counts)
    rho = np.array(rho0, dtype=float)
    traj = np.empty((hours + 1, n))
    srcs = np.zeros((hours, n))
    ledger = np.zeros((hours, 4))
    traj[0] = rho
    for h in range(hours):
        for _ in range(substeps):
            flux = upwind_flux(rho, vn[h], face_i, face_j, length, dt)
            div = divergence(flux, face_i, face_j, n)
            ledger[h, 1] += flux[to_bnd].sum() - flux[from_bnd].sum()
            src = np.where(interior, dt * (gamma[h] - delta[h] * rho), 0.0)
            srcs[h] += src
            ledger[h, 2] += (src * area).sum()
            rho = np.where(interior, rho - div / area + src, rho)
            if len(bnd_cells):
                sums = np.bincount(owner, rho[bnd_idx], minlength=len(bnd_cells))
                rho[bnd_cells] = sums / counts
        if reset[h]:
            ledger[h, 3] = (rho * area)[interior].sum()
            rho[:] = 0.0
        traj[h + 1] = rho
        ledger[h, 0] = (rho * area)[interior].sum()
    return traj, srcs, ledger
