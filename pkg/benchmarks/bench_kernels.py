"""Time the compiled and numpy kernels on the shapes the training loop uses.

Run with ``python3 benchmarks/bench_kernels.py``. Both backends are checked for
agreement before timing.
"""

import argparse
import timeit

import numpy as np

from tripartite import kernels

SHAPES = [
    ("joint batch", 64, 100),
    ("contrastive batch", 64, 100),
    ("uniform K=100", 100, 100),
    ("large batch", 1024, 100),
    ("CIFAR10-like", 64, 10),
]


def _inputs(n, K, seed=0):
    rng = np.random.default_rng(seed)
    S = rng.normal(scale=3.0, size=(n, K))
    y = rng.integers(K, size=n)
    keep = rng.random((n, K)) < 0.4
    w = np.full(n, 1.0 / n)
    return S, y, keep, w


def bench(repeat=5, number=200):
    backends = kernels.available_backends()
    rows = []
    for label, n, K in SHAPES:
        S, y, keep, w = _inputs(n, K)
        calls = {
            "bce_rows": lambda b: kernels.bce_rows(S, y, keep, w, backend=b),
            "ce_rows": lambda b: kernels.ce_rows(S, y, None, w, backend=b),
        }
        for kname, call in calls.items():
            ref = call("python")
            times = {}
            for b in backends:
                out = call(b)
                np.testing.assert_allclose(out[0], ref[0], rtol=1e-12, atol=1e-15)
                np.testing.assert_allclose(out[1], ref[1], rtol=1e-12, atol=1e-15)
                t = min(timeit.repeat(lambda: call(b), repeat=repeat, number=number))
                times[b] = t / number * 1e6
            rows.append((label, f"{n}x{K}", kname, times))
    return rows


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--number", type=int, default=200)
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    rows = bench(args.repeat, args.number)
    names = list(kernels.available_backends())
    head = f"{'case':<18s}{'shape':>10s}{'kernel':>10s}" + "".join(f"{b + ' us':>12s}" for b in names)
    if "cython" in names:
        head += f"{'speedup':>10s}"
    print(head)
    for label, shape, kname, t in rows:
        line = f"{label:<18s}{shape:>10s}{kname:>10s}" + "".join(f"{t[b]:12.1f}" for b in names)
        if "cython" in t:
            line += f"{t['python'] / t['cython']:9.1f}x"
        print(line)


if __name__ == "__main__":
    main()
