"""Benchmark the compiled kernel core against the pure-Python fallback.

Verifies that both backends produce bit-identical outputs, then times each
kernel and prints a speedup table.

    python benchmarks/bench_kernels.py [--quick]
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from hiertax._kernels import _pure  # noqa: E402

try:
    from hiertax._kernels import _core
except ImportError:
    _core = None


def timeit(fn, repeats=3):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench(quick: bool):
    if _core is None:
        print("compiled core not available; build it first:")
        print("  python setup.py build_ext --inplace")
        return 1

    n_stream = 200_000 if quick else 2_000_000
    vol_n = 64 if quick else 128
    rows = []

    # stream fills
    u1 = np.empty(n_stream, dtype=np.uint64)
    u2 = np.empty(n_stream, dtype=np.uint64)
    s1 = _core.splitmix_fill_u64(42, u1)
    s2 = _pure.splitmix_fill_u64(42, u2)
    assert s1 == s2 and (u1 == u2).all()
    rows.append((
        f"splitmix fill ({n_stream:,} u64)",
        timeit(lambda: _core.splitmix_fill_u64(42, u1)),
        timeit(lambda: _pure.splitmix_fill_u64(42, u2)),
    ))

    g1 = np.empty(n_stream, dtype=np.float64)
    g2 = np.empty(n_stream, dtype=np.float64)
    assert _core.gaussian_fill(7, g1) == _pure.gaussian_fill(7, g2)
    assert (g1 == g2).all()
    rows.append((
        f"gaussian fill ({n_stream:,} f64)",
        timeit(lambda: _core.gaussian_fill(7, g1)),
        timeit(lambda: _pure.gaussian_fill(7, g2)),
    ))

    # trilinear resample: vol_n^3 at 0.8 mm -> 1 mm
    rng = np.random.default_rng(0)
    src = rng.standard_normal(vol_n**3).astype(np.float32)
    m = round(vol_n * 0.8)
    d1 = np.empty(m**3, dtype=np.float32)
    d2 = np.empty(m**3, dtype=np.float32)
    args = (src, vol_n, vol_n, vol_n, 0.8, 0.8, 0.8, 1.0, 1.0, 1.0)
    _core.resample_trilinear(*args, d1, m, m, m)
    _pure.resample_trilinear(*args, d2, m, m, m)
    assert (d1 == d2).all()
    rows.append((
        f"trilinear resample ({vol_n}^3 -> {m}^3)",
        timeit(lambda: _core.resample_trilinear(*args, d1, m, m, m)),
        timeit(lambda: _pure.resample_trilinear(*args, d2, m, m, m)),
    ))

    # block pooling on standard 48^3 crops
    crop = rng.standard_normal(48**3).astype(np.float32)
    p1 = np.empty(216, dtype=np.float64)
    p2 = np.empty(216, dtype=np.float64)
    _core.avg_pool3d(crop, 48, 48, 48, 8, p1)
    _pure.avg_pool3d(crop, 48, 48, 48, 8, p2)
    assert (p1 == p2).all()
    reps = 20 if quick else 100
    rows.append((
        f"avg pool 48^3/8 (x{reps})",
        timeit(lambda: [_core.avg_pool3d(crop, 48, 48, 48, 8, p1) for _ in range(reps)]),
        timeit(lambda: [_pure.avg_pool3d(crop, 48, 48, 48, 8, p2) for _ in range(reps)]),
    ))

    print("all outputs bit-identical across backends\n")
    name_w = max(len(r[0]) for r in rows)
    print(f"{'kernel'.ljust(name_w)}  {'cython':>10}  {'pure':>10}  {'speedup':>8}")
    for name, tc, tp in rows:
        print(f"{name.ljust(name_w)}  {tc * 1e3:9.2f}ms  {tp * 1e3:9.2f}ms  {tp / tc:7.1f}x")
    return 0


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--quick", action="store_true", help="smaller problem sizes")
    sys.exit(bench(ap.parse_args().quick))
