"""Compiled vs numpy window kernels, plus naive vs efficient KNConv.

    python benchmarks/bench_kernels.py [--out bench_kernels.json] [--repeats 7]

Prints a table and writes a JSON report of median wall times in milliseconds.
"""
from __future__ import annotations

import argparse
import json
import platform
import time

import numpy as np

from kernelnorm import _kernels_py, knconv

try:
    from kernelnorm import _kernels as compiled
except ImportError:
    compiled = None


def median_ms(fn, repeats):
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return float(np.median(times))


def kernel_cases(shape, k, s, dtype):
    gen = np.random.default_rng(0)
    xp = np.ascontiguousarray(gen.standard_normal(shape).astype(dtype))
    n, c, h, w = shape
    oh, ow = (h - k) // s + 1, (w - k) // s + 1
    cols = np.ascontiguousarray(gen.standard_normal((n, c * k * k, oh * ow)).astype(dtype))
    g1 = gen.standard_normal((n, oh, ow))
    g2 = gen.standard_normal((n, oh, ow))
    return {
        "im2col": lambda m: m.im2col(xp, k, k, s, s),
        "col2im": lambda m: m.col2im(cols, shape, k, k, s, s),
        "window_moments": lambda m: m.window_moments(xp, k, k, s, s),
        "window_moments_grad": lambda m: m.window_moments_grad(g1, g2, xp, k, k, s, s),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--shape", type=int, nargs=4, default=[8, 64, 34, 34],
                    help="padded input shape")
    ap.add_argument("--kernel", type=int, default=3)
    ap.add_argument("--stride", type=int, default=1)
    ap.add_argument("--dtype", choices=("f32", "f64"), default="f32")
    ap.add_argument("--repeats", type=int, default=7)
    ap.add_argument("--out", default="bench_kernels.json")
    args = ap.parse_args(argv)
    dtype = np.float32 if args.dtype == "f32" else np.float64

    report = {"shape": args.shape, "kernel": args.kernel, "stride": args.stride,
              "dtype": args.dtype, "repeats": args.repeats, "machine": platform.machine(),
              "compiled_available": compiled is not None, "kernels": {}}
    print(f"{'kernel':<22}{'compiled ms':>14}{'numpy ms':>12}{'ratio':>8}")
    for name, run in kernel_cases(tuple(args.shape), args.kernel, args.stride, dtype).items():
        py_ms = median_ms(lambda: run(_kernels_py), args.repeats)
        c_ms = median_ms(lambda: run(compiled), args.repeats) if compiled else None
        if compiled:
            same = np.array_equal(np.asarray(run(compiled)), np.asarray(run(_kernels_py)))
        else:
            same = None
        report["kernels"][name] = {"compiled_ms": c_ms, "numpy_ms": py_ms,
                                   "speedup": py_ms / c_ms if c_ms else None,
                                   "bit_identical": same}
        c_txt = f"{c_ms:14.3f}" if c_ms else f"{'n/a':>14}"
        ratio = f"{py_ms / c_ms:8.2f}" if c_ms else f"{'':>8}"
        print(f"{name:<22}{c_txt}{py_ms:12.3f}{ratio}")

    n, c, h, w = args.shape
    report["knconv"] = knconv.bench_knconv((n, c, h - 2, w - 2), c, args.kernel, args.stride, 1,
                                           max(args.repeats, 3), args.dtype)
    kc = report["knconv"]
    print(f"knconv forward: naive {kc['naive_ms']:.1f} ms, efficient {kc['efficient_ms']:.1f} ms "
          f"({kc['speedup']:.1f}x, backend {kc['backend']})")
    with open(args.out, "w") as fh:
        json.dump(report, fh, indent=2)


if __name__ == "__main__":
    main()
