#!/usr/bin/env python3
"""Benchmark the compiled kernels against the pure-numpy fallback.

The hot per-pixel kernels (exhaustive patch-SSD search, bilinear warp) are
implemented twice: a Cython extension selected at import when built, and a
numpy fallback. This script times both on representative workloads and a
downstream consumer (block-matching flow on rendered frames).

Usage:
    python benchmarks/bench_kernels.py [--repeats 5]
"""

import argparse
import time

import numpy as np

from servograph._kernels import available_backends, backend_name
from servograph.rendering import render
from servograph.simulator import ShapeKind, SimConfig, TaskKind, make_task, reset


def timeit(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    backends = available_backends()
    print(f"selected backend: {backend_name()}; available: {', '.join(sorted(backends))}\n")

    cfg = SimConfig()
    task = make_task(TaskKind.SHAPE_SORTING, ShapeKind.TRAPEZE, cfg)
    state = reset(task, 7, cfg)
    frame = render(state, cfg=cfg)
    rng = np.random.default_rng(0)

    h, w = frame.shape
    demo = frame.rgb.astype(np.float64)
    live = np.roll(demo, 2, axis=1)
    mask = np.ones((h, w), dtype=bool)
    flow = rng.uniform(-2, 2, size=(h, w, 2))
    valid = np.ones((h, w), dtype=bool)

    workloads = {
        f"bilinear_warp {w}x{h}": lambda impl: impl.bilinear_warp(demo, flow, valid),
        f"patch_ssd p=2 s=4 {w}x{h} full mask": lambda impl: impl.patch_ssd_search(
            demo, live, mask, 2, 4, 0.05
        ),
        f"patch_ssd p=3 s=6 {w}x{h} full mask": lambda impl: impl.patch_ssd_search(
            demo, live, mask, 3, 6, 0.05
        ),
    }

    rows = []
    for name, work in workloads.items():
        times = {}
        for bname, impl in backends.items():
            times[bname] = timeit(lambda: work(impl), args.repeats)
        rows.append((name, times))

    width = max(len(r[0]) for r in rows) + 2
    header = f"{'workload':<{width}}" + "".join(f"{b:>12}" for b in sorted(backends))
    if len(backends) > 1:
        header += f"{'speedup':>10}"
    print(header)
    print("-" * len(header))
    for name, times in rows:
        line = f"{name:<{width}}" + "".join(f"{times[b] * 1e3:>10.2f}ms" for b in sorted(times))
        if "native" in times and "numpy" in times:
            line += f"{times['numpy'] / times['native']:>9.1f}x"
        print(line)

    if len(backends) > 1:
        print("\nsanity: backends agree on the block-matching result:")
        results = {
            b: impl.patch_ssd_search(demo, live, mask, 2, 4, 0.05) for b, impl in backends.items()
        }
        (f_a, ok_a), (f_b, ok_b) = results.values()
        agree = np.array_equal(ok_a, ok_b) and np.array_equal(f_a[ok_a], f_b[ok_b])
        print(f"  valid masks and flows identical: {agree}")


if __name__ == "__main__":
    main()
