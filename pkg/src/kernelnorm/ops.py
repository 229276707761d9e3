"""Differentiable primitives on :class:`~kernelnorm.autograd.Tensor`.

Image tensors are NCHW.  Every op returns a new tensor; inputs are never
mutated.
"""
from __future__ import annotations

import numpy as np

from . import kernels
from .autograd import Tensor, as_tensor, make_node


def _pair(v):
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _lift(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = _lift(a, b)
    sa, sb = a.shape, b.shape
    return make_node(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = _lift(a, b)
    sa, sb = a.shape, b.shape
    return make_node(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a, b = _lift(a, b)
    ad, bd = a.data, b.data
    return make_node(ad * bd, (a, b),
                     lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                     "mul")


def div(a, b):
    a, b = _lift(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return make_node(out, (a, b), vjp, "div")


def scale(x: Tensor, a: float):
    a = np.asarray(a, dtype=x.dtype)
    return make_node(x.data * a, (x,), lambda g: (g * a,), "scale")


def square(x: Tensor):
    xd = x.data
    return make_node(xd * xd, (x,), lambda g: (2 * g * xd,), "square")


def rsqrt(x: Tensor, eps: float = 0.0):
    """``1 / sqrt(x + eps)``."""
    out = 1.0 / np.sqrt(x.data + np.asarray(eps, dtype=x.dtype))
    return make_node(out, (x,), lambda g: (-0.5 * g * out ** 3,), "rsqrt")


def clamp_min(x: Tensor, lo: float = 0.0):
    keep = x.data >= lo
    return make_node(np.where(keep, x.data, np.asarray(lo, dtype=x.dtype)), (x,),
                     lambda g: (g * keep,), "clamp_min")


def relu(x: Tensor):
    keep = x.data > 0
    return make_node(x.data * keep, (x,), lambda g: (g * keep,), "relu")


def mish(x: Tensor):
    """``x * tanh(softplus(x))``.

    With ``e = exp(x)``, ``tanh(softplus(x)) = n / (n + 2)`` where ``n = e * (e + 2)``;
    past x = 20 the factor is 1 to working precision.
    """
    xd = x.data
    e = np.exp(np.minimum(xd, 20.0))
    n = e * (e + 2.0)
    t = n / (n + 2.0)
    out = xd * t

    def vjp(g):
        sig = e / (1.0 + e)
        return (g * (t + xd * (1.0 - t * t) * sig),)

    return make_node(out, (x,), vjp, "mish")


# ---------------------------------------------------------------- reductions / shape

def sum(x: Tensor, axis=None, keepdims=False):  # noqa: A001
    shape = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(x.dtype, copy=True),)

    return make_node(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), vjp, "sum")


def mean(x: Tensor, axis=None, keepdims=False):
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis, keepdims), 1.0 / count)


def reshape(x: Tensor, shape):
    old = x.shape
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def astype(x: Tensor, dtype):
    dtype = np.dtype(dtype)
    if x.dtype == dtype:
        return x
    old = x.dtype
    return make_node(x.data.astype(dtype), (x,), lambda g: (g.astype(old),), "astype")


def flatten(x: Tensor):
    return reshape(x, (x.shape[0], -1))


def take_channel(x: Tensor, index: int):
    """Channel ``index`` of an NCHW tensor, keeping the channel axis."""
    shape, dtype = x.shape, x.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        full[:, index:index + 1] = g
        return (full,)

    return make_node(x.data[:, index:index + 1].copy(), (x,), vjp, "take_channel")


# ---------------------------------------------------------------- windows

def pad2d(x: Tensor, p_h: int, p_w: int):
    if p_h < 0 or p_w < 0:
        raise ValueError("padding must be non-negative")
    if p_h == 0 and p_w == 0:
        return x
    h, w = x.shape[2:]
    out = np.pad(x.data, ((0, 0), (0, 0), (p_h, p_h), (p_w, p_w)))
    return make_node(out, (x,), lambda g: (g[:, :, p_h:p_h + h, p_w:p_w + w].copy(),), "pad2d")


def crop2d(x: Tensor, p_h: int, p_w: int):
    """Inverse of :func:`pad2d`: drop ``p_h``/``p_w`` border rows/cols."""
    h, w = x.shape[2:]
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, :, p_h:h - p_h, p_w:w - p_w] = g
        return (full,)

    return make_node(x.data[:, :, p_h:h - p_h, p_w:w - p_w].copy(), (x,), vjp, "crop2d")


def window_grid(h: int, w: int, kernel, stride, padding=(0, 0)):
    """Number of window positions ``(n_h, n_w)`` over a padded ``h x w`` plane."""
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise ValueError("kernel exceeds input extent")
    return (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1


def unfold(x, kernel, stride) -> np.ndarray:
    """Kernel windows of ``x`` in row-major window order.

    Returns an array of shape ``(n, n_h * n_w, c, k_h, k_w)``; window ``(i, j)``
    sits at index ``i * n_w + j`` and covers rows ``[i*s_h, i*s_h + k_h)`` and
    columns ``[j*s_w, j*s_w + k_w)``.
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride)
    n, c, h, w = data.shape
    nh, nw = window_grid(h, w, (kh, kw), (sh, sw))
    view = kernels.window_view(np.ascontiguousarray(data), kh, kw, sh, sw)
    return view.transpose(0, 4, 5, 1, 2, 3).reshape(n, nh * nw, c, kh, kw)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0):
    """Cross-correlation of ``x`` (n, c, h, w) with ``weight`` (f, c, k_h, k_w)."""
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    xd, wd = x.data, weight.data
    n, c, h, w = xd.shape
    f, cw, kh, kw = wd.shape
    if cw != c:
        raise ValueError(f"channel mismatch: input has {c} channels, weights expect {cw}")
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise ValueError("kernel exceeds padded input")
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xd
    oh, ow = (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1
    cols = kernels.im2col(xp, kh, kw, sh, sw)
    w2 = wd.reshape(f, -1)
    out = np.matmul(w2, cols).reshape(n, f, oh, ow)
    if bias is not None:
        out += bias.data[:, None, None]

    def vjp(g):
        g2 = g.reshape(n, f, oh * ow)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(wd.shape)
        if x.requires_grad:
            gxp = kernels.col2im(np.matmul(w2.T, g2), xp.shape, kh, kw, sh, sw)
            gx = gxp[:, :, ph:ph + h, pw:pw + w] if (ph or pw) else gxp
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, vjp, "conv2d")


def maxpool2d(x: Tensor, kernel=2, stride=None, padding=0):
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride if stride is not None else kernel)
    ph, pw = _pair(padding)
    xd = x.data
    n, c, h, w = xd.shape
    if ph or pw:
        xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=-np.inf)
    else:
        xp = xd
    oh, ow = window_grid(h, w, (kh, kw), (sh, sw), (ph, pw))
    win = kernels.window_view(np.ascontiguousarray(xp), kh, kw, sh, sw)
    win = win.reshape(n, c, kh * kw, oh, ow)
    arg = win.argmax(axis=2)
    out = np.take_along_axis(win, arg[:, :, None], axis=2)[:, :, 0]

    def vjp(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for a in range(kh):
            for b in range(kw):
                hit = arg == a * kw + b
                gxp[:, :, a:a + sh * (oh - 1) + 1:sh, b:b + sw * (ow - 1) + 1:sw] += g * hit
        return (gxp[:, :, ph:ph + h, pw:pw + w],)

    return make_node(out, (x,), vjp, "maxpool2d")


def avgpool2d(x: Tensor, kernel=2, stride=None, padding=0):
    """Average pooling; zero padding counts toward the window size."""
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride if stride is not None else kernel)
    ph, pw = _pair(padding)
    xd = x.data
    n, c, h, w = xd.shape
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xd
    oh, ow = window_grid(h, w, (kh, kw), (sh, sw), (ph, pw))
    win = kernels.window_view(np.ascontiguousarray(xp), kh, kw, sh, sw)
    out = win.mean(axis=(2, 3)).astype(xd.dtype, copy=False)
    inv = 1.0 / (kh * kw)

    def vjp(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for a in range(kh):
            for b in range(kw):
                gxp[:, :, a:a + sh * (oh - 1) + 1:sh, b:b + sw * (ow - 1) + 1:sw] += g * inv
        return (gxp[:, :, ph:ph + h, pw:pw + w],)

    return make_node(out, (x,), vjp, "avgpool2d")


def _adaptive_bins(size, out):
    return [(i * size // out, -(-(i + 1) * size // out)) for i in range(out)]


def adaptive_avg_pool2d(x: Tensor, output_size=(1, 1)):
    """Average over adaptive bins: bin ``i`` spans ``[floor(i*h/o), ceil((i+1)*h/o))``."""
    oh, ow = _pair(output_size)
    xd = x.data
    n, c, h, w = xd.shape
    rows, cols = _adaptive_bins(h, oh), _adaptive_bins(w, ow)
    out = np.empty((n, c, oh, ow), dtype=xd.dtype)
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            out[:, :, i, j] = xd[:, :, r0:r1, c0:c1].mean(axis=(2, 3))

    def vjp(g):
        gx = np.zeros(xd.shape, dtype=g.dtype)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                gx[:, :, r0:r1, c0:c1] += g[:, :, i:i + 1, j:j + 1] / ((r1 - r0) * (c1 - c0))
        return (gx,)

    return make_node(out, (x,), vjp, "adaptive_avg_pool2d")


# ---------------------------------------------------------------- dense / loss

def matmul(a: Tensor, b: Tensor):
    ad, bd = a.data, b.data
    return make_node(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None):
    """``x @ weight.T + bias`` with ``weight`` of shape (out, in)."""
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def vjp(g):
        gb = g.sum(axis=0) if bias is not None else None
        return g @ wd, g.T @ xd, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, vjp, "linear")


def dropout(x: Tensor, mask: np.ndarray):
    """Multiply by a fixed (already scaled) mask."""
    mask = np.asarray(mask, dtype=x.dtype)
    return make_node(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy over the batch; ``labels`` are class indices."""
    z = logits.data
    labels = np.asarray(labels, dtype=np.int64)
    n = z.shape[0]
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    loss = (logsum - shifted[np.arange(n), labels]).mean()

    def vjp(g):
        p = np.exp(shifted - logsum[:, None])
        p[np.arange(n), labels] -= 1.0
        return (p * (g / n),)

    return make_node(np.asarray(loss, dtype=z.dtype), (logits,), vjp, "cross_entropy")
