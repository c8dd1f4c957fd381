"""Compare the compiled and numpy kernel backends.

Run ``python3 benchmarks/bench_kernels.py``. Each kernel is timed on both
backends (when the extension is built) and the outputs are checked for
equality before any timing is reported.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from mltp.kernels import available_backends

CASES = {
    "small": dict(n=16, c=8, h=16, w=16, k=3, window=2),
    "medium": dict(n=32, c=16, h=32, w=32, k=3, window=2),
}


def _best(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def bench(case, repeat=5, number=3):
    rng = np.random.default_rng(0)
    n, c, h, w, k, win = (case[key] for key in ("n", "c", "h", "w", "k", "window"))
    x = rng.standard_normal((n, c, h, w))
    pad = (k - 1) // 2
    rows = []
    backends = available_backends()
    reference = {}
    for name, mod in backends.items():
        cols = mod.im2col(x, k, k, 1, pad)
        back = mod.col2im(cols, n, c, h, w, k, k, 1, pad)
        pooled, idx = mod.pool_argmax(x, win, win)
        scattered = mod.pool_scatter(pooled, idx, h, w)
        outputs = (cols, back, pooled, idx, scattered)
        if reference:
            for a, b in zip(reference["out"], outputs):
                np.testing.assert_array_equal(a, b)
        else:
            reference["out"] = outputs
        timings = {
            "im2col": _best(lambda: mod.im2col(x, k, k, 1, pad), repeat, number),
            "col2im": _best(lambda: mod.col2im(cols, n, c, h, w, k, k, 1, pad), repeat, number),
            "pool_argmax": _best(lambda: mod.pool_argmax(x, win, win), repeat, number),
            "pool_scatter": _best(lambda: mod.pool_scatter(pooled, idx, h, w), repeat, number),
        }
        rows.append((name, timings))
    return rows


def main(argv=None):
    parser = argparse.ArgumentParser(description="kernel backend benchmark")
    parser.add_argument("--case", choices=sorted(CASES), nargs="+", default=sorted(CASES))
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    backends = available_backends()
    if "cython" not in backends:
        print("compiled extension not built; timing the numpy backend only")
    for case in args.case:
        rows = bench(CASES[case], repeat=args.repeat)
        print(f"\n[{case}] {CASES[case]}")
        print(f"{'kernel':14s}" + "".join(f"{name:>12s}" for name, _ in rows) +
              ("     speedup" if len(rows) == 2 else ""))
        for kernel in rows[0][1]:
            times = [t[kernel] for _, t in rows]
            line = f"{kernel:14s}" + "".join(f"{1e3 * t:10.3f}ms" for t in times)
            if len(times) == 2:
                line += f"{times[1] / times[0] if rows[0][0] == 'cython' else times[0] / times[1]:11.2f}x"
            print(line)


if __name__ == "__main__":
    main()
