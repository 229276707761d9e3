"""Kernel-normalized convolution: reference and window-statistics forms."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np

from . import kernels, ops
from .autograd import Tensor, backward, no_grad
from .norm import KernelNormConfig, _input_mask, kernel_norm, kn_mean_var
from .rng import Rng


# windows with at most this many elements are corrected in float64
PROMOTE_WINDOW = 64


@dataclass
class KnConvParams:
    ch_in: int
    ch_out: int
    weight: Tensor
    bias: Tensor | None
    kernel: tuple[int, int] = (3, 3)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    dropout_p: float = 0.0
    eps: float = 1e-5

    def __post_init__(self):
        self.kernel = ops._pair(self.kernel)
        self.stride = ops._pair(self.stride)
        self.padding = ops._pair(self.padding)
        expected = (self.ch_out, self.ch_in, *self.kernel)
        if self.weight.shape != expected:
            raise ValueError(f"weight shape {self.weight.shape} != {expected}")
        if self.bias is not None and self.bias.shape != (self.ch_out,):
            raise ValueError("bias must be a ch_out vector")

    @classmethod
    def init(cls, ch_in, ch_out, kernel=3, stride=1, padding=0, dropout_p=0.0, eps=1e-5,
             bias=True, rng: Rng | None = None, dtype=np.float64, stream=(0,)):
        """He-style normal weights (std = sqrt(2 / fan_in)), zero bias."""
        kh, kw = ops._pair(kernel)
        gen = (rng or Rng(0)).stream(*stream)
        std = np.sqrt(2.0 / (ch_in * kh * kw))
        w = Tensor((gen.standard_normal((ch_out, ch_in, kh, kw)) * std).astype(dtype),
                   requires_grad=True)
        b = Tensor(np.zeros(ch_out, dtype=dtype), requires_grad=True) if bias else None
        return cls(ch_in, ch_out, w, b, (kh, kw), stride, padding, dropout_p, eps)

    @property
    def norm_config(self) -> KernelNormConfig:
        return KernelNormConfig(self.kernel, self.stride, self.padding, self.dropout_p, self.eps)

    def parameter_count(self) -> int:
        return self.weight.data.size + (self.bias.data.size if self.bias is not None else 0)

    def describe(self) -> dict:
        return {
            "ch_in": self.ch_in, "ch_out": self.ch_out, "kernel": list(self.kernel),
            "stride": list(self.stride), "padding": list(self.padding),
            "dropout_p": self.dropout_p, "eps": self.eps, "bias": self.bias is not None,
        }


def output_shape(h, w, params: KnConvParams):
    return ops.window_grid(h, w, params.kernel, params.stride, params.padding)


def knconv_naive(x: Tensor, params: KnConvParams, rng: Rng | None = None, training=False,
                 keys=(), sample_ids=None) -> Tensor:
    """KernelNorm the input, then convolve with stride equal to the kernel."""
    if x.shape[1] != params.ch_in:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, layer expects {params.ch_in}")
    cfg = params.norm_config
    mask = _input_mask(x, cfg, rng, training, keys, sample_ids)
    normalized = kernel_norm(x, cfg, mask=mask)
    return ops.conv2d(normalized, params.weight, params.bias, stride=params.kernel, padding=0)


def knconv_efficient(x: Tensor, params: KnConvParams, rng: Rng | None = None, training=False,
                     keys=(), sample_ids=None) -> Tensor:
    """Convolve the raw input once and correct it with per-window statistics.

    ``(conv(x) - mu * sum(Z_f)) / sqrt(var + eps) + b``
    """
    if x.shape[1] != params.ch_in:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, layer expects {params.ch_in}")
    # conv - mu * sum(Z) cancels badly on low-variance windows, which are
    # common only when the window is small; those (cheap) cases run in float64
    dtype = x.dtype
    work = np.float64 if params.ch_in * params.kernel[0] * params.kernel[1] <= PROMOTE_WINDOW else dtype
    xw = ops.astype(x, work)
    weight = ops.astype(params.weight, work)
    conv_out = ops.conv2d(xw, weight, None, stride=params.stride, padding=params.padding)
    mu, var = kn_mean_var(xw, params.norm_config, rng, training, keys, sample_ids)
    f = params.ch_out
    weight_sum = ops.reshape(ops.sum(weight, axis=(1, 2, 3)), (1, f, 1, 1))
    out = ops.mul(ops.sub(conv_out, ops.mul(mu, weight_sum)), ops.rsqrt(var, params.eps))
    out = ops.astype(out, dtype)
    if params.bias is not None:
        out = ops.add(out, ops.reshape(params.bias, (1, f, 1, 1)))
    return out


# ---------------------------------------------------------------- benchmark

def _median_ms(fn, repeats):
    fn()  # warm-up
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return float(np.median(times))


def bench_knconv(shape=(8, 64, 32, 32), ch_out=64, kernel=3, stride=1, padding=1,
                 repeats=5, dtype="f32", seed=0, backward_pass=True) -> dict:
    """Median wall time of the naive and efficient forward (and forward+backward)."""
    if repeats < 3:
        raise ValueError("repeats must be >= 3")
    np_dtype = {"f32": np.float32, "f64": np.float64}[dtype]
    rng = Rng(seed)
    x = Tensor(rng.stream(1).standard_normal(shape).astype(np_dtype), requires_grad=True)
    params = KnConvParams.init(shape[1], ch_out, kernel, stride, padding, rng=rng, dtype=np_dtype)

    def forward(fn):
        def run():
            with no_grad():
                fn(x, params)
        return run

    def forward_backward(fn):
        def run():
            out = fn(x, params)
            backward(ops.sum(out))
        return run

    report = {
        "shape": list(shape),
        "params": params.describe(),
        "naive_ms": _median_ms(forward(knconv_naive), repeats),
        "efficient_ms": _median_ms(forward(knconv_efficient), repeats),
        "dtype": dtype,
        "repeats": repeats,
        "backend": kernels.BACKEND,
    }
    report["speedup"] = report["naive_ms"] / report["efficient_ms"]
    if backward_pass:
        report["naive_fwd_bwd_ms"] = _median_ms(forward_backward(knconv_naive), repeats)
        report["efficient_fwd_bwd_ms"] = _median_ms(forward_backward(knconv_efficient), repeats)
        report["fwd_bwd_speedup"] = report["naive_fwd_bwd_ms"] / report["efficient_fwd_bwd_ms"]
    return report


def write_bench_report(report: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2)
