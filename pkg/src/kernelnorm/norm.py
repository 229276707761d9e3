"""Normalization layers: KernelNorm and the batch/layer/instance/group family."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import kernels, ops
from .autograd import Tensor, make_node
from .rng import Rng, dropout_mask


@dataclass(frozen=True)
class KernelNormConfig:
    kernel: tuple[int, int] = (3, 3)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    dropout_p: float = 0.0
    eps: float = 1e-5

    def __post_init__(self):
        for name in ("kernel", "stride", "padding"):
            object.__setattr__(self, name, ops._pair(getattr(self, name)))
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise ValueError(f"invalid window geometry {self}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")


@dataclass
class AffineNormConfig:
    kind: str  # batch | layer | instance | group
    group_size: int | None = None
    eps: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        if self.kind not in ("batch", "layer", "instance", "group"):
            raise ValueError(f"unknown norm kind {self.kind!r}")
        if self.kind == "group" and (self.group_size is None or self.group_size < 1):
            raise ValueError("group norm needs group_size >= 1")

    def groups(self, channels: int) -> int:
        if self.kind == "layer":
            return 1
        if self.kind == "instance":
            return channels
        if self.kind == "group":
            if channels % self.group_size:
                raise ValueError(
                    f"{channels} channels not divisible into groups of {self.group_size}")
            return channels // self.group_size
        raise ValueError("batch norm has no groups")


class WindowStats(NamedTuple):
    mu: Tensor
    var: Tensor


def kernel_norm_output_shape(h: int, w: int, cfg: KernelNormConfig) -> tuple[int, int]:
    if h < 1 or w < 1:
        raise ValueError("input extent must be positive")
    (kh, kw), (sh, sw), (ph, pw) = cfg.kernel, cfg.stride, cfg.padding
    nh = (h + 2 * ph - kh) // sh + 1
    nw = (w + 2 * pw - kw) // sw + 1
    if h + 2 * ph < kh or w + 2 * pw < kw or nh < 1 or nw < 1:
        raise ValueError("kernel exceeds padded input: no window fits")
    return kh * nh, kw * nw


def _input_mask(x: Tensor, cfg: KernelNormConfig, rng, training, keys, sample_ids):
    if not training or cfg.dropout_p == 0.0:
        return None
    if rng is None:
        raise ValueError("training-mode dropout needs an Rng")
    return dropout_mask(rng, cfg.dropout_p, x.shape, keys, sample_ids, dtype=x.dtype)


def window_moments(x: Tensor, cfg: KernelNormConfig) -> Tensor:
    """Per-window first and second raw moments, stacked as channels (n, 2, n_h, n_w).

    The divisor is always ``c * k_h * k_w``.
    """
    (kh, kw), (sh, sw), (ph, pw) = cfg.kernel, cfg.stride, cfg.padding
    xd = x.data
    n, c, h, w = xd.shape
    kernel_norm_output_shape(h, w, cfg)
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xd
    s1, s2 = kernels.window_moments(xp, kh, kw, sh, sw)
    count = c * kh * kw
    out = np.stack([s1, s2], axis=1) / count

    def vjp(g):
        g = g.astype(np.float64, copy=False) / count
        gxp = kernels.window_moments_grad(g[:, 0], g[:, 1], xp, kh, kw, sh, sw)
        return (gxp[:, :, ph:ph + h, pw:pw + w] if (ph or pw) else gxp,)

    return make_node(out.astype(xd.dtype), (x,), vjp, "window_moments")


def kn_mean_var(x: Tensor, cfg: KernelNormConfig, rng: Rng | None = None, training: bool = False,
                keys=(), sample_ids=None) -> WindowStats:
    """Mean and biased variance of every (dropped-out) kernel window.

    Variance is ``E[x^2] - E[x]^2`` accumulated in float64 and clamped at zero.
    One dropout mask is drawn per input tensor and shared by overlapping windows.
    """
    mask = _input_mask(x, cfg, rng, training, keys, sample_ids)
    xd = ops.dropout(x, mask) if mask is not None else x
    moments = window_moments(xd, cfg)
    mu = ops.take_channel(moments, 0)
    second = ops.take_channel(moments, 1)
    var = ops.clamp_min(ops.sub(second, ops.square(mu)), 0.0)
    return WindowStats(mu, var)


def kernel_norm(x: Tensor, cfg: KernelNormConfig, rng: Rng | None = None, training: bool = False,
                keys=(), sample_ids=None, mask: np.ndarray | None = None) -> Tensor:
    """Standardize every kernel window and tile the normalized windows.

    Output is (n, c, k_h * n_h, k_w * n_w): window ``(i, j)`` lands in the block
    starting at ``(i * k_h, j * k_w)``.  Statistics come from the dropped-out
    window (two-pass, float64); the window itself is normalized undropped.
    """
    (kh, kw), (sh, sw), (ph, pw) = cfg.kernel, cfg.stride, cfg.padding
    xd = x.data
    dtype = xd.dtype
    n, c, h, w = xd.shape
    hout, wout = kernel_norm_output_shape(h, w, cfg)
    nh, nw = hout // kh, wout // kw
    if mask is None:
        mask = _input_mask(x, cfg, rng, training, keys, sample_ids)
    pad = ((0, 0), (0, 0), (ph, ph), (pw, pw))
    xp = np.pad(xd, pad) if (ph or pw) else np.ascontiguousarray(xd)
    # (n, c, n_h, k_h, n_w, k_w)
    units = kernels.window_view(xp, kh, kw, sh, sw).transpose(0, 1, 4, 2, 5, 3)
    if mask is not None:
        mp = np.pad(np.asarray(mask, dtype=dtype), pad)
        munits = kernels.window_view(mp, kh, kw, sh, sw).transpose(0, 1, 4, 2, 5, 3)
        dropped = units * munits
    else:
        munits = None
        dropped = units
    axes = (1, 3, 5)
    count = c * kh * kw
    mu = dropped.mean(axis=axes, keepdims=True, dtype=np.float64)
    var = np.square(dropped - mu).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + cfg.eps)
    centered = units - mu.astype(dtype)
    out = (centered * inv.astype(dtype)).reshape(n, c, hout, wout)

    def vjp(g):
        g6 = g.reshape(n, c, nh, kh, nw, kw)
        inv_d = inv.astype(dtype)
        gmu = -(g6.sum(axis=axes, keepdims=True, dtype=np.float64) * inv)
        gvar = -0.5 * (g6 * centered).sum(axis=axes, keepdims=True, dtype=np.float64) * inv ** 3
        dev = dropped - mu.astype(dtype)
        gdropped = (gmu / count).astype(dtype) + (2.0 * gvar / count).astype(dtype) * dev
        if munits is not None:
            gdropped = gdropped * munits
        gunits = g6 * inv_d + gdropped
        cols = gunits.transpose(0, 1, 3, 5, 2, 4).reshape(n, count, nh * nw)
        gxp = kernels.col2im(cols, xp.shape, kh, kw, sh, sw)
        return (gxp[:, :, ph:ph + h, pw:pw + w] if (ph or pw) else gxp,)

    return make_node(out, (x,), vjp, "kernel_norm")


# ---------------------------------------------------------------- affine family

def _standardize(x: Tensor, axes, eps, stats=None):
    """(x - mean) / sqrt(var + eps) over ``axes``; returns the node and (mean, var)."""
    xd = x.data
    dtype = xd.dtype
    if stats is None:
        mu = xd.mean(axis=axes, keepdims=True, dtype=np.float64)
        var = np.square(xd - mu).mean(axis=axes, keepdims=True)
        frozen = False
    else:
        mu, var = stats
        frozen = True
    inv = (1.0 / np.sqrt(var + eps)).astype(dtype)
    xhat = ((xd - mu.astype(dtype)) * inv).astype(dtype)

    def vjp(g):
        if frozen:
            return (g * inv,)
        gm = g.mean(axis=axes, keepdims=True)
        gxm = (g * xhat).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return make_node(xhat, (x,), vjp, "standardize"), (mu, var)


def affine(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    c = x.shape[1]
    return ops.add(ops.mul(x, ops.reshape(gamma, (1, c, 1, 1))), ops.reshape(beta, (1, c, 1, 1)))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel standardization over (N, H, W).

    In training mode batch statistics are used and the running buffers are
    updated in place: ``r <- (1 - momentum) * r + momentum * batch_stat``
    (biased variance).  In eval mode the running buffers are used.
    """
    c = x.shape[1]
    if training:
        xhat, (mu, var) = _standardize(x, (0, 2, 3), eps)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(c)
        running_var *= 1.0 - momentum
        running_var += momentum * var.reshape(c)
    else:
        stats = (running_mean.reshape(1, c, 1, 1), running_var.reshape(1, c, 1, 1))
        xhat, _ = _standardize(x, (0, 2, 3), eps, stats=stats)
    return affine(xhat, gamma, beta)


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    n, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ValueError(f"{c} channels not divisible into {groups} groups")
    xg = ops.reshape(x, (n, groups, c // groups, h * w))
    xhat, _ = _standardize(xg, (2, 3), eps)
    return affine(ops.reshape(xhat, (n, c, h, w)), gamma, beta)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    return group_norm(x, 1, gamma, beta, eps)


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    return group_norm(x, x.shape[1], gamma, beta, eps)
