"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--elements N] [--pairs P] [--repeat R]

Each kernel is run once untimed (JIT warm-up), then the best of R runs is
reported together with the largest difference between the two paths.
"""
import argparse
import time

import numpy as np

from physface import kernels
from physface.transforms import random_rotations


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t)
    return min(times), out


def separated_pairs(rng, P):
    """Random VT/EE pairs with the second primitive lifted clear of the first."""
    x = rng.uniform(0.0, 1.0, size=(P, 4, 3))
    kind = rng.integers(0, 2, size=P)
    x[kind == 0, 0, 2] += 2.0
    x[kind == 1, 2:, 2] += 2.0
    return x, kind


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--elements", type=int, default=20000)
    ap.add_argument("--pairs", type=int, default=5000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)

    F = random_rotations(rng, args.elements) + 0.1 * rng.standard_normal((args.elements, 3, 3))
    A = np.broadcast_to(np.eye(3), F.shape).copy() + 0.05 * rng.standard_normal(F.shape)
    x, kind = separated_pairs(rng, args.pairs)
    x1 = x.copy()
    x1[:, 0, 2] += np.where(kind == 0, -3.0, 3.0)

    cases = [
        ("project_rotations", lambda: kernels.project_rotations_numpy(F, A),
         lambda: kernels.project_rotations_numba(F, A), lambda o: o),
        ("pair_distance", lambda: kernels.pair_distance_numpy(x, kind),
         lambda: kernels.pair_distance_numba(x, kind), lambda o: o[0]),
        ("pair_barrier", lambda: kernels.pair_barrier_numpy(x, kind, 2.5),
         lambda: kernels.pair_barrier_numba(x, kind, 2.5), lambda o: o[0]),
        ("pair_toi", lambda: kernels.pair_toi_numpy(x, x1, kind),
         lambda: kernels.pair_toi_numba(x, x1, kind), lambda o: o),
    ]
    print(f"{'kernel':<20}{'numpy s':>12}{'numba s':>12}{'speedup':>10}{'max diff':>12}")
    for name, f_np, f_nb, key in cases:
        t_np, o_np = best_of(f_np, args.repeat)
        t_nb, o_nb = best_of(f_nb, args.repeat)
        a, b = np.asarray(key(o_np)), np.asarray(key(o_nb))
        finite = np.isfinite(a) & np.isfinite(b)
        diff = float(np.max(np.abs(a[finite] - b[finite]))) if finite.any() else 0.0
        print(f"{name:<20}{t_np:>12.4f}{t_nb:>12.4f}{t_np / t_nb:>10.1f}{diff:>12.2e}")


if __name__ == "__main__":
    main()
