"""Time the compiled kernels against the numpy fallback.

Run from the repository root after an editable install::

    python3 benchmarks/bench_kernels.py [--repeat 20]

Each row reports the median wall time of both backends on the same inputs and
checks that their outputs agree.
"""
import argparse
import statistics
import time

import numpy as np

from mmvqa import _pykernels

try:
    from mmvqa import _ckernels
except ImportError:  # pragma: no cover - depends on the build
    _ckernels = None


def median_time(fn, repeat):
    fn()  # warm-up
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def cases(rng):
    x = rng.standard_normal((32, 64, 64, 3))
    yield "im2col 32x64x64x3 k5 s2", "im2col", (x, 5, 2, 2)
    h = rng.standard_normal((32, 16, 16, 32))
    yield "im2col 32x16x16x32 k3 s1", "im2col", (h, 3, 1, 1)
    cols = rng.standard_normal((32 * 16 * 16, 9 * 32))
    yield "col2im 32x16x16x32 k3 s1", "col2im", (cols, h.shape, 3, 1, 1)
    img = rng.random((256, 256, 3))
    ys, xs = np.meshgrid(np.linspace(0, 255, 64), np.linspace(0, 255, 64), indexing="ij")
    yield "bilinear 256->64", "bilinear_sample", (img, ys, xs)
    big_y, big_x = np.meshgrid(np.linspace(0, 255, 224), np.linspace(0, 255, 224), indexing="ij")
    yield "bilinear 256->224", "bilinear_sample", (img, big_y, big_x)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    if _ckernels is None:
        print("compiled kernels are not built; nothing to compare")
        return 1
    print(f"{'case':<28}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}  max|diff|")
    for label, name, inputs in cases(np.random.default_rng(args.seed)):
        py_fn, c_fn = getattr(_pykernels, name), getattr(_ckernels, name)
        diff = float(np.max(np.abs(py_fn(*inputs) - c_fn(*inputs))))
        t_py = median_time(lambda: py_fn(*inputs), args.repeat)
        t_c = median_time(lambda: c_fn(*inputs), args.repeat)
        print(f"{label:<28}{t_py * 1e3:>10.3f}{t_c * 1e3:>11.3f}{t_py / t_c:>8.2f}x  {diff:.1e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
