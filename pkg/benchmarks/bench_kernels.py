"""Time im2col / col2im: compiled extension vs numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20]

Shapes follow the toy backbone on a 40-image P x Q batch.
"""
import argparse
import timeit

import numpy as np

from horde import _kernels_py

try:
    from horde import _ckernels
except ImportError:
    _ckernels = None

# (input shape, kernel, stride, pad) for the three conv layers
LAYERS = [((40, 28, 28, 1), 3, 2, 1), ((40, 14, 14, 16), 3, 2, 1), ((40, 7, 7, 32), 3, 1, 1)]


def bench(mod, repeat):
    rows = []
    rng = np.random.default_rng(0)
    for shape, k, s, p in LAYERS:
        x = rng.normal(size=shape)
        cols = mod.im2col(x, k, k, s, p)
        t_fwd = min(timeit.repeat(lambda: mod.im2col(x, k, k, s, p), number=1, repeat=repeat))
        t_bwd = min(timeit.repeat(lambda: mod.col2im(cols, shape, k, k, s, p), number=1, repeat=repeat))
        rows.append((shape, t_fwd, t_bwd))
    return rows


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    py = bench(_kernels_py, args.repeat)
    cy = bench(_ckernels, args.repeat) if _ckernels is not None else None
    print(f"{'input':>20} {'op':>7} {'python ms':>10} {'cython ms':>10} {'speedup':>8}")
    for i, (shape, f, b) in enumerate(py):
        for op, t in (("im2col", f), ("col2im", b)):
            tc = None if cy is None else cy[i][1 if op == "im2col" else 2]
            extra = "" if tc is None else f"{tc * 1e3:10.3f} {t / tc:8.2f}"
            print(f"{str(shape):>20} {op:>7} {t * 1e3:10.3f} {extra}")
    if cy is None:
        print("compiled extension not built; only the fallback was timed")


if __name__ == "__main__":
    main()
