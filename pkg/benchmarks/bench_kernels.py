"""Time the compiled convolution kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20]
"""

import argparse
import timeit

import numpy as np

from tafenet import _kernels_py

try:
    from tafenet import _ckernels
except ImportError:  # extension not built
    _ckernels = None

SHAPES = [  # (batch, height, width, c_in, c_out, k)
    (8, 6, 6, 8, 8, 3),
    (16, 14, 14, 16, 32, 3),
    (4, 28, 28, 32, 32, 5),
]


def bench(mod, x, w, gy, k, repeat):
    out = {}
    for name, fn in (
        ("forward", lambda: mod.conv2d_same_forward(x, w)),
        ("grad_input", lambda: mod.conv2d_same_backward_input(gy, w)),
        ("grad_filter", lambda: mod.conv2d_same_backward_filter(x, gy, k)),
    ):
        out[name] = min(timeit.repeat(fn, number=1, repeat=repeat))
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    if _ckernels is None:
        print("compiled extension not available; timing the numpy path only")
    print(f"{'shape':<28}{'op':<13}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}")
    for n, h, wd, ci, co, k in SHAPES:
        x = rng.standard_normal((n, h, wd, ci))
        w = rng.standard_normal((k, k, ci, co))
        gy = rng.standard_normal((n, h, wd, co))
        py = bench(_kernels_py, x, w, gy, k, args.repeat)
        cy = bench(_ckernels, x, w, gy, k, args.repeat) if _ckernels else {}
        for op, t in py.items():
            c = cy.get(op)
            extra = f"{c * 1e3:>11.3f}{t / c:>8.1f}x" if c else f"{'-':>11}{'-':>9}"
            print(f"{str((n, h, wd, ci, co, k)):<28}{op:<13}{t * 1e3:>10.3f}{extra}")


if __name__ == "__main__":
    main()
