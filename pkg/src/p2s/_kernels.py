"""Fused elementwise kernels for the hot training path.

The shrinkage step touches multi-megabyte code tensors ten times per
forward pass, so the add + threshold + finiteness check is fused into a
single memory pass.  JIT-compiled with numba when available; the numpy
fallbacks apply the same IEEE operations elementwise (only reduction
order in the threshold gradient differs), just with more memory traffic.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional accelerator
    HAVE_NUMBA = False


def _shrink_py(x, eps):
    c, h, w = x.shape
    out = np.empty_like(x)
    finite = True
    for ci in range(c):
        e = eps[ci]
        for i in range(h):
            for j in range(w):
                p = x[ci, i, j]
                if not np.isfinite(p):
                    finite = False
                a = abs(p) - e
                if a > 0.0:
                    out[ci, i, j] = a if p > 0.0 else -a
                else:
                    out[ci, i, j] = 0.0
    return out, finite


def _shrink_add_py(code, lifted, eps):
    c, h, w = code.shape
    out = np.empty_like(code)
    finite = True
    for ci in range(c):
        e = eps[ci]
        for i in range(h):
            for j in range(w):
                p = code[ci, i, j] + lifted[ci, i, j]
                if not np.isfinite(p):
                    finite = False
                a = abs(p) - e
                if a > 0.0:
                    out[ci, i, j] = a if p > 0.0 else -a
                else:
                    out[ci, i, j] = 0.0
    return out, finite


def _shrink_backward_py(g, out):
    c, h, w = g.shape
    gx = np.empty_like(g)
    geps = np.zeros(c)
    for ci in range(c):
        s = 0.0
        for i in range(h):
            for j in range(w):
                o = out[ci, i, j]
                if o != 0.0:
                    gv = g[ci, i, j]
                    gx[ci, i, j] = gv
                    s -= gv if o > 0.0 else -gv
                else:
                    gx[ci, i, j] = 0.0
        geps[ci] = s
    return gx, geps


def _shrink_np(x, eps):
    a = np.abs(x)
    a -= eps[:, None, None]
    np.maximum(a, 0.0, out=a)
    np.copysign(a, x, out=a)
    return a, bool(np.isfinite(x).all())


def _shrink_add_np(code, lifted, eps):
    pre = code + lifted
    out, _ = _shrink_np(pre, eps)
    return out, bool(np.isfinite(pre).all())


def _shrink_backward_np(g, out):
    active = out != 0.0
    gx = np.where(active, g, 0.0)
    geps = -np.sum(gx * np.sign(out), axis=(1, 2))
    return gx, geps


if HAVE_NUMBA:
    shrink = njit(cache=True)(_shrink_py)
    shrink_add = njit(cache=True)(_shrink_add_py)
    shrink_backward = njit(cache=True)(_shrink_backward_py)
else:
    shrink = _shrink_np
    shrink_add = _shrink_add_np
    shrink_backward = _shrink_backward_np
