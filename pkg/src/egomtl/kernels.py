"""Volume/column rearrangement kernels used by conv3d.

The compiled extension ``egomtl._kernels`` is used when it was built;
otherwise the NumPy implementations below are selected at import time.
Set ``EGOMTL_PURE_PYTHON=1`` to force the fallback.
"""
from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = ["BACKEND", "vol2col", "col2vol", "py_vol2col", "py_col2vol", "out_extent"]


def out_extent(size: int, k: int, s: int, p: int) -> int:
    return (size + 2 * p - k) // s + 1


def py_vol2col(x, kt, kh, kw, st, sh, sw, pt, ph, pw):
    """Unfold ``x[B, C, T, H, W]`` into ``[B, C*kt*kh*kw, To*Ho*Wo]``."""
    B, C = x.shape[:2]
    if pt or ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))
    win = sliding_window_view(x, (kt, kh, kw), axis=(2, 3, 4))[:, :, ::st, ::sh, ::sw]
    To, Ho, Wo = win.shape[2:5]
    # -> B, C, kt, kh, kw, To, Ho, Wo
    win = win.transpose(0, 1, 5, 6, 7, 2, 3, 4)
    return np.ascontiguousarray(win).reshape(B, C * kt * kh * kw, To * Ho * Wo)


def py_col2vol(cols, C, T, H, W, kt, kh, kw, st, sh, sw, pt, ph, pw):
    """Adjoint of :func:`py_vol2col`: scatter-add columns back into a volume."""
    B = cols.shape[0]
    To, Ho, Wo = out_extent(T, kt, st, pt), out_extent(H, kh, sh, ph), out_extent(W, kw, sw, pw)
    padded = np.zeros((B, C, T + 2 * pt, H + 2 * ph, W + 2 * pw), dtype=cols.dtype)
    cols = cols.reshape(B, C, kt, kh, kw, To, Ho, Wo)
    for a in range(kt):
        for i in range(kh):
            for j in range(kw):
                padded[:, :,
                       a:a + st * (To - 1) + 1:st,
                       i:i + sh * (Ho - 1) + 1:sh,
                       j:j + sw * (Wo - 1) + 1:sw] += cols[:, :, a, i, j]
    return np.ascontiguousarray(padded[:, :, pt:pt + T, ph:ph + H, pw:pw + W])


def _select():
    if os.environ.get("EGOMTL_PURE_PYTHON", "") not in ("", "0"):
        return "python", py_vol2col, py_col2vol
    try:
        from egomtl import _kernels
    except ImportError:
        return "python", py_vol2col, py_col2vol

    def c_vol2col(x, kt, kh, kw, st, sh, sw, pt, ph, pw):
        return _kernels.vol2col(np.ascontiguousarray(x), kt, kh, kw, st, sh, sw, pt, ph, pw)

    def c_col2vol(cols, C, T, H, W, kt, kh, kw, st, sh, sw, pt, ph, pw):
        return _kernels.col2vol(np.ascontiguousarray(cols), C, T, H, W,
                                kt, kh, kw, st, sh, sw, pt, ph, pw)

    return "cython", c_vol2col, c_col2vol


BACKEND, vol2col, col2vol = _select()
