"""Compare the compiled kernels against the numpy fallback.

Usage::

    python benchmarks/bench_kernels.py [--repeat N]

Both backends are imported directly so a single process times them side by
side; outputs are checked for exact equality before timing.
"""

import argparse
import importlib
import timeit

import numpy as np

from geofcn import _kernels_py

try:
    compiled = importlib.import_module("geofcn._kernels")
except ImportError:
    compiled = None


def cases(rng):
    x = rng.standard_normal((8, 16, 64, 64))
    cols = _kernels_py.im2col(x, 3, 3, 1, 1)
    x4 = rng.standard_normal((8, 32, 32, 32))
    cols4 = _kernels_py.im2col(x4, 4, 4, 2, 1)
    plane = rng.standard_normal((256, 256)).astype(np.float32)
    truth = rng.integers(0, 4, 64 * 64 * 50)
    pred = rng.integers(0, 4, truth.size)
    return [
        ("im2col 3x3 s1 (8,16,64,64)", "im2col", (x, 3, 3, 1, 1)),
        ("col2im 3x3 s1 (8,16,64,64)", "col2im", (cols, x.shape, 3, 3, 1, 1)),
        ("im2col 4x4 s2 (8,32,32,32)", "im2col", (x4, 4, 4, 2, 1)),
        ("col2im 4x4 s2 (8,32,32,32)", "col2im", (cols4, x4.shape, 4, 4, 2, 1)),
        ("median3x3 256x256", "median3x3", (plane,)),
        ("confusion 204800 px, C=4", "confusion_counts", (truth, pred, 4)),
    ]


def best_of(fn, args, repeat):
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    opts = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':<30} {'numpy ms':>10} {'cython ms':>10} {'speedup':>8}")
    for label, name, args in cases(rng):
        ref = getattr(_kernels_py, name)
        t_py = best_of(ref, args, opts.repeat) * 1e3
        if compiled is None:
            print(f"{label:<30} {t_py:>10.2f} {'n/a':>10} {'':>8}")
            continue
        fast = getattr(compiled, name)
        if not np.array_equal(ref(*args), fast(*args)):
            raise SystemExit(f"{label}: backends disagree")
        t_cy = best_of(fast, args, opts.repeat) * 1e3
        print(f"{label:<30} {t_py:>10.2f} {t_cy:>10.2f} {t_py / t_cy:>7.1f}x")


if __name__ == "__main__":
    main()
