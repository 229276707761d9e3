"""Backend selection for the sliding-window kernels.

The compiled extension is used when importable; set ``KN_PURE_PYTHON=1`` to
force the numpy fallback.
"""
import os

import numpy as np

from . import _kernels_py

if os.environ.get("KN_PURE_PYTHON"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py
        BACKEND = "python"


def _c(a):
    return a if a.flags.c_contiguous else np.ascontiguousarray(a)


def im2col(xp, kh, kw, sh, sw):
    return _impl.im2col(_c(xp), kh, kw, sh, sw)


def col2im(cols, shape, kh, kw, sh, sw):
    return _impl.col2im(_c(cols), tuple(shape), kh, kw, sh, sw)


def window_moments(xp, kh, kw, sh, sw):
    return _impl.window_moments(_c(xp), kh, kw, sh, sw)


def window_moments_grad(g1, g2, xp, kh, kw, sh, sw):
    g1 = _c(np.asarray(g1, dtype=np.float64))
    g2 = _c(np.asarray(g2, dtype=np.float64))
    return _impl.window_moments_grad(g1, g2, _c(xp), kh, kw, sh, sw)


window_view = _kernels_py.window_view
