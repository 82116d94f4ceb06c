"""Time the compiled kernels against their numpy fallbacks.

Usage: python benchmarks/bench_kernels.py [--repeats 5] [--width 512]

Each kernel runs on inputs sized like a real call (a full-panorama splat,
one occupancy-grid scan, one descriptor match); outputs of both backends
are checked for equality before timing.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from panocalib import _fallback

try:
    from panocalib import _core
except ImportError:  # extension not built
    _core = None


def best_of(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(width: int, rng: np.random.Generator) -> dict:
    n_pix = width * (width // 2)
    dest = rng.integers(0, n_pix, n_pix).astype(np.int64)
    depth = rng.uniform(0.5, 8.0, n_pix)
    cells = 240
    ends = rng.integers(0, cells, size=(width, 2)).astype(np.int64)
    a = rng.integers(0, 256, size=(500, 32), dtype=np.uint8).view(np.uint64)
    b = rng.integers(0, 256, size=(500, 32), dtype=np.uint8).view(np.uint64)
    return {
        "splat_zbuffer": lambda m: m.splat_zbuffer(dest, depth, n_pix),
        "trace_free": lambda m: m.trace_free(cells, cells, cells // 2, cells // 2, ends),
        "hamming_matrix": lambda m: m.hamming_matrix(a, b),
    }


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--width", type=int, default=512, help="panorama width for the splat and scan sizes")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    if _core is None:
        print("compiled extension not available; timing the numpy fallback only")
    print(f"{'kernel':<16} {'numpy [ms]':>11} {'cython [ms]':>12} {'speed-up':>9}")
    for name, call in cases(args.width, np.random.default_rng(args.seed)).items():
        t_np = best_of(lambda: call(_fallback), args.repeats)
        if _core is None:
            print(f"{name:<16} {1e3 * t_np:>11.2f} {'-':>12} {'-':>9}")
            continue
        if not np.array_equal(call(_fallback), call(_core)):
            raise SystemExit(f"{name}: backends disagree")
        t_cy = best_of(lambda: call(_core), args.repeats)
        print(f"{name:<16} {1e3 * t_np:>11.2f} {1e3 * t_cy:>12.2f} {t_np / t_cy:>8.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
