#!/usr/bin/env python3
"""Throughput comparison of the numba kernels against their numpy fallbacks.

Run:  python benchmarks/bench_kernels.py [--batch 4096]

The backend is selected per call through VORTEX_MIXER_NUMBA, so both paths
run in one process; results are asserted identical before timing.
"""

import argparse
import os
import time

import numpy as np

from vortex_mixer import accel
from vortex_mixer import nonlinear as nl
from vortex_mixer import spectral as sp


def timeit(fn, repeat=5):
    fn()  # warm-up / jit compile
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t0) / repeat


def with_backend(flag: str, fn):
    old = os.environ.get("VORTEX_MIXER_NUMBA")
    os.environ["VORTEX_MIXER_NUMBA"] = flag
    try:
        return fn()
    finally:
        if old is None:
            del os.environ["VORTEX_MIXER_NUMBA"]
        else:
            os.environ["VORTEX_MIXER_NUMBA"] = old


def bench_row(name, fn):
    t_np = with_backend("0", lambda: timeit(fn))
    t_nb = with_backend("1", lambda: timeit(fn))
    r_np = with_backend("0", fn)
    r_nb = with_backend("1", fn)
    same = all(
        np.array_equal(a, b)
        for a, b in zip(np.atleast_1d(r_np), np.atleast_1d(r_nb))
    )
    print(
        f"{name:34s} numpy {1e3 * t_np:9.2f} ms   numba {1e3 * t_nb:9.2f} ms   "
        f"speedup {t_np / t_nb:5.2f}x   identical={same}"
    )


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--batch", type=int, default=4096)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    for M in (8, 16):
        lat = sp.build_lattice(M, 4)
        w = rng.standard_normal(lat.n_modes)
        wb = rng.standard_normal((args.batch, lat.n_modes))
        tg = rng.standard_normal((2, args.batch, lat.n_modes))
        tab = nl.interaction_table(M)

        print(f"\n-- lattice M={M} (grid {lat.grid_size}^2, batch {args.batch}) --")
        bench_row(
            f"interaction table ({tab[0].size} nnz)",
            lambda: accel.bilinear_table_apply(*tab[:4], w, w, tab[4]),
        )
        hat = sp.pack_hat(lat, wb)
        flat = hat.reshape(hat.shape[:-2] + (-1,))
        bench_row("pack_spectrum", lambda: sp.pack_hat(lat, wb))
        bench_row(
            "apply_mult_stack",
            lambda: accel.apply_mult_stack(lat._mult_flat, flat),
        )
        g4 = sp.four_grids(lat, sp.pack_hat(lat, np.concatenate([wb[None], tg])))
        bench_row("advection_products", lambda: accel.advection_products(g4))
        bench_row("unpack_spectrum", lambda: sp.unpack_hat(lat, hat))
        bench_row(
            "end-to-end transport (w + 2 tangents)",
            lambda: nl.transport_all(lat, wb, tg),
        )


if __name__ == "__main__":
    main()
