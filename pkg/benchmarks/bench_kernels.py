"""Time the numba-compiled kernels against their pure-numpy fallbacks.

Run with the default backend, then compare against:
    ESBM_DISABLE_NUMBA=1 python benchmarks/bench_kernels.py
or pass --both to fork a child with the flag set and print a side-by-side
table.
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def timeit(fn, *args, repeat=5, warmup=1):
    for _ in range(warmup):
        fn(*args)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def run_benchmarks() -> dict:
    from esbm import kernels

    rng = np.random.default_rng(0)
    results = {"backend": "numba" if kernels.USE_NUMBA else "numpy"}

    points = rng.normal(0, 1, (4096, 8))
    centroids = rng.normal(0, 1, (64, 8))
    lambdas = rng.uniform(0.1, 1.0, 64)
    omega = rng.uniform(0, 1, (64, 8))
    results["rbf_energy_grad(4096x8, 64c)"] = timeit(
        kernels.rbf_energy_grad, points, centroids, lambdas, omega, 1e-6, 1.0)
    results["rbf_h(4096x8, 64c)"] = timeit(
        kernels.rbf_h, points, centroids, lambdas, omega)

    x = rng.normal(0, 1, (2048, 16))
    y = rng.normal(0, 1, (2048, 16))
    results["pairwise_sq_dists(2048x2048)"] = timeit(kernels.pairwise_sq_dists, x, y)

    pts = rng.normal(0, 1, (100_000, 4))
    results["double_well(1e5x4)"] = timeit(kernels.double_well, pts, 1.0, 1.0)

    mb = rng.uniform(-1.5, 1.0, (100_000, 2))
    results["muller_brown(1e5x2)"] = timeit(kernels.muller_brown, mb)
    return results


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--both", action="store_true",
                        help="also run the numpy fallback in a subprocess")
    parser.add_argument("--json", action="store_true", help="emit raw JSON")
    args = parser.parse_args()

    mine = run_benchmarks()
    if args.json:
        print(json.dumps(mine))
        return 0

    rows = [(k, v) for k, v in mine.items() if k != "backend"]
    if not args.both:
        print(f"backend: {mine['backend']}")
        for name, t in rows:
            print(f"  {name:36s} {t * 1e3:9.3f} ms")
        return 0

    env = dict(os.environ, ESBM_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, __file__, "--json"], env=env,
                         capture_output=True, text=True, check=True)
    other = json.loads(out.stdout)
    print(f"{'kernel':36s} {mine['backend']:>12s} {other['backend']:>12s} {'speedup':>9s}")
    for name, t in rows:
        t2 = other[name]
        print(f"{name:36s} {t * 1e3:10.3f}ms {t2 * 1e3:10.3f}ms {t2 / t:8.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
