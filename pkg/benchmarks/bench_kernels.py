"""Time the compiled kernels against the pure-Python fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints one row per kernel and problem size with the median wall time of each
backend and the speed-up. Exits non-zero if the backends disagree.
"""
import argparse
import statistics
import sys
import time

import numpy as np

from fscd import kernels


def _boxes(rng, n):
    lo = rng.uniform(0, 0.8, (n, 2))
    return np.concatenate([lo, lo + rng.uniform(0.02, 0.2, (n, 2))], axis=1)


def _time(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return statistics.median(times)


def cases(rng):
    for n in (10, 100, 600):
        cost = rng.uniform(0, 1, (min(n, 50), n))
        yield "linear_assignment", f"{cost.shape[0]}x{n}", (cost,)
    for n, m in ((100, 20), (600, 100), (2000, 300)):
        yield "pairwise_iou_xyxy", f"{n}x{m}", (_boxes(rng, n), _boxes(rng, m))
        yield "pairwise_giou_xyxy", f"{n}x{m}", (_boxes(rng, n), _boxes(rng, m))
    for p, g in ((200, 100), (2000, 500)):
        ious = rng.uniform(0, 1, (p, g))
        yield "greedy_match", f"{p}x{g}", (ious, np.linspace(0.5, 0.95, 10))


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    impls = kernels.backends()
    if "cython" not in impls:
        print("compiled extension not built; only the Python fallback is available")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':<20} {'size':>10} {'python ms':>10} {'cython ms':>10} {'speed-up':>9}")
    ok = True
    for name, size, inputs in cases(rng):
        py, cy = getattr(impls["python"], name), getattr(impls["cython"], name)
        a, b = py(*inputs), cy(*inputs)
        ok &= bool(np.allclose(a, b, atol=1e-12))
        tp = _time(lambda: py(*inputs), args.repeat)
        tc = _time(lambda: cy(*inputs), args.repeat)
        print(f"{name:<20} {size:>10} {tp * 1e3:>10.3f} {tc * 1e3:>10.3f} {tp / tc:>8.1f}x")
    if not ok:
        print("backends disagree", file=sys.stderr)
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
