"""Numpy implementations of the hot sliding-window kernels.

Same signatures and contracts as the compiled ``_kernels`` module; used when
the extension is not built or ``KN_PURE_PYTHON`` is set.
"""
import numpy as np
from numpy.lib.stride_tricks import as_strided


def _grid(hp, wp, kh, kw, sh, sw):
    return (hp - kh) // sh + 1, (wp - kw) // sw + 1


def window_view(xp, kh, kw, sh, sw):
    """Read-only (n, c, kh, kw, oh, ow) view of every kernel window of ``xp``."""
    n, c, hp, wp = xp.shape
    oh, ow = _grid(hp, wp, kh, kw, sh, sw)
    s0, s1, s2, s3 = xp.strides
    return as_strided(
        xp,
        shape=(n, c, kh, kw, oh, ow),
        strides=(s0, s1, s2, s3, s2 * sh, s3 * sw),
        writeable=False,
    )


def im2col(xp, kh, kw, sh, sw):
    n, c = xp.shape[:2]
    win = window_view(np.ascontiguousarray(xp), kh, kw, sh, sw)
    oh, ow = win.shape[-2:]
    return win.reshape(n, c * kh * kw, oh * ow)


def col2im(cols, shape, kh, kw, sh, sw):
    n, c, hp, wp = shape
    oh, ow = _grid(hp, wp, kh, kw, sh, sw)
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    out = np.zeros(shape, dtype=cols.dtype)
    for a in range(kh):
        for b in range(kw):
            out[:, :, a:a + sh * (oh - 1) + 1:sh, b:b + sw * (ow - 1) + 1:sw] += cols[:, :, a, b]
    return out


def window_moments(xp, kh, kw, sh, sw):
    """Per-window sums of x and x**2 over (channel, kernel rows, kernel cols).

    Accumulates in float64 regardless of the input dtype.
    """
    x64 = xp.astype(np.float64, copy=False)
    plane1 = x64.sum(axis=1)
    plane2 = np.einsum("nchw,nchw->nhw", x64, x64)
    n, hp, wp = plane1.shape
    oh, ow = _grid(hp, wp, kh, kw, sh, sw)
    s1 = np.zeros((n, oh, ow))
    s2 = np.zeros((n, oh, ow))
    for a in range(kh):
        for b in range(kw):
            rows = slice(a, a + sh * (oh - 1) + 1, sh)
            cols = slice(b, b + sw * (ow - 1) + 1, sw)
            s1 += plane1[:, rows, cols]
            s2 += plane2[:, rows, cols]
    return s1, s2


def window_moments_grad(g1, g2, xp, kh, kw, sh, sw):
    """Vector-Jacobian product of ``window_moments`` with respect to ``xp``."""
    n, c, hp, wp = xp.shape
    oh, ow = g1.shape[1:]
    plane1 = np.zeros((n, hp, wp))
    plane2 = np.zeros((n, hp, wp))
    for a in range(kh):
        for b in range(kw):
            rows = slice(a, a + sh * (oh - 1) + 1, sh)
            cols = slice(b, b + sw * (ow - 1) + 1, sw)
            plane1[:, rows, cols] += g1
            plane2[:, rows, cols] += g2
    grad = plane1[:, None] + 2.0 * xp * plane2[:, None]
    return grad.astype(xp.dtype, copy=False)
