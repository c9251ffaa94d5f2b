"""Time the compiled kernels against the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from birdflux import _pykernels, kernels
from birdflux.tessellation import Domain, build_hex_tessellation

try:
    from birdflux import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    # the synthetic generator's fine grid: a quarter of the 137.5 km model cell
    tess = build_hex_tessellation(Domain(-400, 400, -400, 400), 137.5 / 4)
    n, F = tess.n_cells, tess.n_faces
    rho = rng.uniform(0, 100, n)
    vn = rng.normal(size=F) * 20
    flux = rng.normal(size=F)
    src = rng.normal(size=(20 * n, 8))
    idx = rng.integers(0, n, 20 * n)
    H = 24
    vns = rng.normal(size=(H, F)) * 20
    gamma = rng.uniform(0, 5, (H, n))
    delta = rng.uniform(0, 0.2, (H, n))
    reset = np.zeros(H, bool)
    return tess, {
        "upwind_flux": lambda impl: kernels.upwind_flux(rho, vn, tess.face_i, tess.face_j,
                                                        tess.face_length, 0.25, impl=impl),
        "divergence": lambda impl: kernels.divergence(flux, tess.face_i, tess.face_j, n, impl=impl),
        "scatter_add_rows": lambda impl: kernels.scatter_add_rows(src, idx, n, impl=impl),
        "advect_24h": lambda impl: kernels.advect_hours(rho, tess, vns, gamma, delta, reset,
                                                        4, 0.25, impl=impl),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    tess, fns = cases(np.random.default_rng(0))
    impls = [("python", _pykernels)] + ([("cython", _ckernels)] if _ckernels else [])
    print(f"grid: {tess.n_cells} cells, {tess.n_faces} faces; active backend: {kernels.BACKEND}")
    print(f"{'kernel':<18}" + "".join(f"{name:>14}" for name, _ in impls) + f"{'speed-up':>10}")
    for kname, fn in fns.items():
        times = []
        for _, impl in impls:
            number = 1 if kname == "advect_24h" and impl is _pykernels else 5
            t = min(timeit.repeat(lambda: fn(impl), number=number, repeat=args.repeat)) / number
            times.append(t)
        row = f"{kname:<18}" + "".join(f"{t * 1e3:>12.3f}ms" for t in times)
        if len(times) == 2:
            row += f"{times[0] / times[1]:>9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
