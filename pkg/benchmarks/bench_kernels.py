"""Time the numba kernels against their numpy twins on training-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import time

import numpy as np

from pointattn import _kernels as kn


def cases(rng):
    pos = rng.normal(size=(512, 3))
    origins = np.repeat(rng.normal(size=(1, 3)) * 4, 64 * 64, axis=0)
    dirs = rng.normal(size=(64 * 64, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    index = rng.integers(0, 512, size=64 * 64 * 8)
    src = rng.normal(size=(64 * 64 * 8, 64))
    cloud = rng.normal(size=(2048, 3))
    surface = rng.normal(size=(4096, 3))
    return {
        "topk_perpendicular": (pos, origins, dirs, 8),
        "topk_rows": (rng.normal(size=(4096, 512)), 8),
        "scatter_add_rows": (index, src, 512),
        "pairwise_sqdist": (cloud, cloud),
        "nearest_sqdist": (cloud, surface),
    }


def best_time(fn, args, repeat):
    fn(*args)  # warm up (and compile)
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not kn.NUMBA_KERNELS:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<20} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, inputs in cases(rng).items():
        t_np = best_time(kn.NUMPY_KERNELS[name], inputs, args.repeat)
        t_nb = best_time(kn.NUMBA_KERNELS[name], inputs, args.repeat)
        print(f"{name:<20} {1e3 * t_np:>10.2f} {1e3 * t_nb:>10.2f} {t_np / t_nb:>7.1f}x")


if __name__ == "__main__":
    main()
