"""im2col / col2im kernels used by the convolution ops.

Both kernels come in two flavours: a numba ``@njit`` loop nest and a pure
numpy path built from strided views.  The numba path is used when numba
imports cleanly and ``PGN_DISABLE_NUMBA`` is not set to a truthy value.

Column layout is kernel-offset major, ``(C, KH, KW, N, OH, OW)``: a reshape
to ``(C*KH*KW, N*OH*OW)`` is free and each (channel, offset) slab is one
strided copy of the input.
"""

import os

import numpy as np

_DISABLED = os.environ.get("PGN_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

try:
    if _DISABLED:
        raise ImportError("numba disabled by PGN_DISABLE_NUMBA")
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def identity(fn):
            return fn

        return identity


def backend():
    return "numba" if NUMBA_AVAILABLE else "numpy"


# ---------------------------------------------------------------- numpy path


def im2col_numpy(xp, kh, kw, stride, oh, ow):
    """Gather sliding windows of an already padded NCHW array."""
    n, c = xp.shape[:2]
    out = np.empty((c, kh, kw, n, oh, ow), dtype=xp.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    hs, ws = stride * (oh - 1) + 1, stride * (ow - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out[:, i, j] = xt[:, :, i : i + hs : stride, j : j + ws : stride]
    return out


def col2im_numpy(cols, hp, wp, stride):
    """Scatter-add columns onto a padded canvas laid out (C, N, HP, WP)."""
    c, kh, kw, n, oh, ow = cols.shape
    out = np.zeros((c, n, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, i, j]
    return out


# ---------------------------------------------------------------- numba path
# The stride-1 branches are split out so the inner loop vectorises.


@njit(cache=True)
def _im2col_nb(xp, kh, kw, stride, oh, ow):
    n, c = xp.shape[0], xp.shape[1]
    out = np.empty((c, kh, kw, n, oh, ow), dtype=xp.dtype)
    for ch in range(c):
        for i in range(kh):
            for j in range(kw):
                for b in range(n):
                    src = xp[b, ch]
                    dst = out[ch, i, j, b]
                    if stride == 1:
                        for y in range(oh):
                            row, d = src[y + i], dst[y]
                            for x in range(ow):
                                d[x] = row[x + j]
                    else:
                        for y in range(oh):
                            row, d = src[y * stride + i], dst[y]
                            for x in range(ow):
                                d[x] = row[x * stride + j]
    return out


@njit(cache=True)
def _col2im_nb(cols, hp, wp, stride):
    c, kh, kw, n, oh, ow = cols.shape
    out = np.zeros((c, n, hp, wp), dtype=cols.dtype)
    for ch in range(c):
        for i in range(kh):
            for j in range(kw):
                for b in range(n):
                    src = cols[ch, i, j, b]
                    dst = out[ch, b]
                    if stride == 1:
                        for y in range(oh):
                            row, d = dst[y + i], src[y]
                            for x in range(ow):
                                row[x + j] += d[x]
                    else:
                        for y in range(oh):
                            row, d = dst[y * stride + i], src[y]
                            for x in range(ow):
                                row[x * stride + j] += d[x]
    return out


def im2col(xp, kh, kw, stride, oh, ow):
    """Columns ``(C, KH, KW, N, OH, OW)`` of a padded NCHW array."""
    if NUMBA_AVAILABLE:
        return _im2col_nb(np.ascontiguousarray(xp), kh, kw, stride, oh, ow)
    return im2col_numpy(xp, kh, kw, stride, oh, ow)


def col2im(cols, hp, wp, stride):
    """Adjoint of :func:`im2col`; returns a ``(C, N, HP, WP)`` canvas."""
    if NUMBA_AVAILABLE:
        return _col2im_nb(np.ascontiguousarray(cols), hp, wp, stride)
    return col2im_numpy(cols, hp, wp, stride)
