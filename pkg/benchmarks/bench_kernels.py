"""Time the compiled im2col/col2im kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Shapes are the 3x3 convolutions the desk flow runs at each scale.
"""
import argparse
import timeit

import numpy as np

from flowshift import _kernels_py, kernels

SHAPES = [  # (N, C, H, W) activations entering a coupling subnet
    (16, 2, 16, 16),
    (16, 64, 16, 16),
    (16, 4, 8, 8),
    (16, 64, 8, 8),
    (16, 8, 4, 4),
    (16, 64, 4, 4),
]


def bench(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat)) * 1e3


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if kernels.BACKEND != "cython":
        print("compiled extension not available; only the fallback can be timed")
    rng = np.random.default_rng(0)
    print(f"{'shape':<20}{'op':<8}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}")
    for shape in SHAPES:
        x = rng.standard_normal(shape).astype(np.float32)
        cols = _kernels_py.im2col(x, 3, 3, 1)
        n, c, h, w = shape
        ops = {
            "im2col": (lambda m: lambda: m.im2col(x, 3, 3, 1)),
            "col2im": (lambda m: lambda: m.col2im(cols, n, c, h, w, 3, 3, 1)),
        }
        for name, make in ops.items():
            ref = bench(make(_kernels_py), args.repeat)
            if kernels.BACKEND == "cython":
                fast = bench(make(kernels), args.repeat)
                np.testing.assert_allclose(make(kernels)(), make(_kernels_py)(), rtol=1e-6, atol=1e-6)
                print(f"{str(shape):<20}{name:<8}{ref:>10.3f}{fast:>11.3f}{ref / fast:>8.1f}x")
            else:
                print(f"{str(shape):<20}{name:<8}{ref:>10.3f}{'-':>11}{'-':>9}")


if __name__ == "__main__":
    main()
