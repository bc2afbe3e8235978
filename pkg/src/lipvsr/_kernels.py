"""Hot loops behind the convolution ops.

Each kernel has a numba ``@njit`` body and a pure-numpy twin with identical
semantics. The numba path is used when numba imports cleanly and the
environment variable ``LIPVSR_DISABLE_NUMBA`` is unset (or ``0``).

Both paths work on *pre-padded* inputs so that padding mode stays a concern
of the caller.
"""

from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_DISABLED = os.environ.get("LIPVSR_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")

try:
    if _DISABLED:
        raise ImportError("numba disabled by LIPVSR_DISABLE_NUMBA")
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        def decorator(func):
            return func

        if len(args) == 1 and callable(args[0]):
            return args[0]
        return decorator


BACKEND = "numba" if NUMBA_AVAILABLE else "numpy"


# --------------------------------------------------------------------------
# numpy reference path
# --------------------------------------------------------------------------


def im2col_numpy(xp: np.ndarray, k: int) -> np.ndarray:
    """(B, C, H+k-1, W+k-1) padded input -> (B, C*k*k, H*W) patch matrix."""
    B, C, Hp, Wp = xp.shape
    H, W = Hp - k + 1, Wp - k + 1
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # B C H W k k
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(B, C * k * k, H * W)


def col2im_numpy(cols: np.ndarray, C: int, k: int, Hp: int, Wp: int) -> np.ndarray:
    """Adjoint of :func:`im2col_numpy`: scatter-add patches into a padded map."""
    B = cols.shape[0]
    H, W = Hp - k + 1, Wp - k + 1
    c6 = cols.reshape(B, C, k, k, H, W)
    out = np.zeros((B, C, Hp, Wp), dtype=cols.dtype)
    for ky in range(k):
        for kx in range(k):
            out[:, :, ky : ky + H, kx : kx + W] += c6[:, :, ky, kx]
    return out


# --------------------------------------------------------------------------
# numba path
# --------------------------------------------------------------------------


@njit(cache=True)
def _im2col_nb(xp, k):
    B, C, Hp, Wp = xp.shape
    H = Hp - k + 1
    W = Wp - k + 1
    out = np.empty((B, C * k * k, H * W), dtype=xp.dtype)
    for b in range(B):
        for c in range(C):
            for ky in range(k):
                for kx in range(k):
                    r = (c * k + ky) * k + kx
                    for y in range(H):
                        base = y * W
                        for x in range(W):
                            out[b, r, base + x] = xp[b, c, y + ky, x + kx]
    return out


@njit(cache=True)
def _col2im_nb(cols, C, k, Hp, Wp):
    B = cols.shape[0]
    H = Hp - k + 1
    W = Wp - k + 1
    out = np.zeros((B, C, Hp, Wp), dtype=cols.dtype)
    for b in range(B):
        for c in range(C):
            for ky in range(k):
                for kx in range(k):
                    r = (c * k + ky) * k + kx
                    for y in range(H):
                        base = y * W
                        for x in range(W):
                            out[b, c, y + ky, x + kx] += cols[b, r, base + x]
    return out


def im2col(xp: np.ndarray, k: int) -> np.ndarray:
    if NUMBA_AVAILABLE:
        return _im2col_nb(np.ascontiguousarray(xp), k)
    return im2col_numpy(xp, k)


def col2im(cols: np.ndarray, C: int, k: int, Hp: int, Wp: int) -> np.ndarray:
    if NUMBA_AVAILABLE:
        return _col2im_nb(np.ascontiguousarray(cols), C, k, Hp, Wp)
    return col2im_numpy(cols, C, k, Hp, Wp)
