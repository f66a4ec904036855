"""Hot loops for bilinear tap sampling, jitted with numba when available.

The numpy fallback is semantically identical (used when numba is missing or
REGIMECAST_NO_NUMBA is set); both paths are deterministic: every output
element is written by exactly one thread.
"""

from __future__ import annotations

import os

import numpy as np

try:  # pragma: no cover - exercised via the public wrappers
    if os.environ.get("REGIMECAST_NO_NUMBA"):
        raise ImportError("disabled by REGIMECAST_NO_NUMBA")
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def deco(fn):
            return fn
        return deco

    prange = range


@njit(parallel=True, cache=True)
def _gather_fwd_jit(feat, y, x, out):
    b_n, c_n, h, w = feat.shape
    n_pts = y.shape[1]
    for b in prange(b_n):
        for n in range(n_pts):
            yy = y[b, n]
            xx = x[b, n]
            y0 = int(np.floor(yy))
            x0 = int(np.floor(xx))
            wy = yy - y0
            wx = xx - x0
            w00 = (1.0 - wy) * (1.0 - wx)
            w01 = (1.0 - wy) * wx
            w10 = wy * (1.0 - wx)
            w11 = wy * wx
            in00 = 0 <= y0 < h and 0 <= x0 < w
            in01 = 0 <= y0 < h and 0 <= x0 + 1 < w
            in10 = 0 <= y0 + 1 < h and 0 <= x0 < w
            in11 = 0 <= y0 + 1 < h and 0 <= x0 + 1 < w
            for c in range(c_n):
                acc = 0.0
                if in00:
                    acc += w00 * feat[b, c, y0, x0]
                if in01:
                    acc += w01 * feat[b, c, y0, x0 + 1]
                if in10:
                    acc += w10 * feat[b, c, y0 + 1, x0]
                if in11:
                    acc += w11 * feat[b, c, y0 + 1, x0 + 1]
                out[b, c, n] = acc


@njit(parallel=True, cache=True)
def _gather_bwd_jit(g, feat, y, x, gfeat, gy, gx):
    b_n, c_n, h, w = feat.shape
    n_pts = y.shape[1]
    for b in prange(b_n):
        for n in range(n_pts):
            yy = y[b, n]
            xx = x[b, n]
            y0 = int(np.floor(yy))
            x0 = int(np.floor(xx))
            wy = yy - y0
            wx = xx - x0
            w00 = (1.0 - wy) * (1.0 - wx)
            w01 = (1.0 - wy) * wx
            w10 = wy * (1.0 - wx)
            w11 = wy * wx
            in00 = 0 <= y0 < h and 0 <= x0 < w
            in01 = 0 <= y0 < h and 0 <= x0 + 1 < w
            in10 = 0 <= y0 + 1 < h and 0 <= x0 < w
            in11 = 0 <= y0 + 1 < h and 0 <= x0 + 1 < w
            acc_y = 0.0
            acc_x = 0.0
            for c in range(c_n):
                gc = g[b, c, n]
                f00 = feat[b, c, y0, x0] if in00 else 0.0
                f01 = feat[b, c, y0, x0 + 1] if in01 else 0.0
                f10 = feat[b, c, y0 + 1, x0] if in10 else 0.0
                f11 = feat[b, c, y0 + 1, x0 + 1] if in11 else 0.0
                if in00:
                    gfeat[b, c, y0, x0] += gc * w00
                if in01:
                    gfeat[b, c, y0, x0 + 1] += gc * w01
                if in10:
                    gfeat[b, c, y0 + 1, x0] += gc * w10
                if in11:
                    gfeat[b, c, y0 + 1, x0 + 1] += gc * w11
                acc_y += gc * ((f10 - f00) * (1.0 - wx) + (f11 - f01) * wx)
                acc_x += gc * ((f01 - f00) * (1.0 - wy) + (f11 - f10) * wy)
            gy[b, n] = acc_y
            gx[b, n] = acc_x


def _gather_fwd_numpy(feat, y, x, out):
    b, c, h, w = feat.shape
    y0 = np.floor(y).astype(np.int64)
    x0 = np.floor(x).astype(np.int64)
    wy = (y - y0).astype(feat.dtype)
    wx = (x - x0).astype(feat.dtype)
    feat_flat = feat.reshape(b, c, h * w)
    out[...] = 0.0
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        yc, xc = y0 + dy, x0 + dx
        valid = ((yc >= 0) & (yc < h) & (xc >= 0) & (xc < w)).astype(feat.dtype)
        idx = np.clip(yc, 0, h - 1) * w + np.clip(xc, 0, w - 1)
        vals = np.take_along_axis(feat_flat, idx[:, None, :], axis=2)
        cw = (wy if dy else 1.0 - wy) * (wx if dx else 1.0 - wx) * valid
        out += cw[:, None, :] * vals


def _gather_bwd_numpy(g, feat, y, x, gfeat, gy, gx):
    b, c, h, w = feat.shape
    y0 = np.floor(y).astype(np.int64)
    x0 = np.floor(x).astype(np.int64)
    wy = (y - y0).astype(feat.dtype)
    wx = (x - x0).astype(feat.dtype)
    feat_flat = feat.reshape(b, c, h * w)
    gfeat_flat = np.zeros(b * c * h * w, dtype=np.float64)
    boff = (np.arange(b, dtype=np.int64) * c)[:, None, None]
    coff = np.arange(c, dtype=np.int64)[None, :, None]
    fvals, masks = [], []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        yc, xc = y0 + dy, x0 + dx
        valid = ((yc >= 0) & (yc < h) & (xc >= 0) & (xc < w)).astype(feat.dtype)
        idx = np.clip(yc, 0, h - 1) * w + np.clip(xc, 0, w - 1)
        cw = (wy if dy else 1.0 - wy) * (wx if dx else 1.0 - wx) * valid
        full_idx = ((boff + coff) * (h * w) + idx[:, None, :]).reshape(-1)
        contrib = (g * cw[:, None, :]).reshape(-1)
        gfeat_flat += np.bincount(full_idx, weights=contrib, minlength=gfeat_flat.size)
        vals = np.take_along_axis(feat_flat, idx[:, None, :], axis=2)
        fvals.append(vals * valid[:, None, :])
        masks.append(valid)
    gfeat[...] = gfeat_flat.reshape(feat.shape).astype(feat.dtype)
    f00, f01, f10, f11 = fvals
    wyb, wxb = wy[:, None, :], wx[:, None, :]
    gy[...] = (g * ((f10 - f00) * (1.0 - wxb) + (f11 - f01) * wxb)).sum(axis=1)
    gx[...] = (g * ((f01 - f00) * (1.0 - wyb) + (f11 - f10) * wyb)).sum(axis=1)


def gather_forward(feat, y, x):
    """out[b,c,n] = bilinear sample of feat[b,c] at (y[b,n], x[b,n])."""
    b, c = feat.shape[:2]
    out = np.empty((b, c, y.shape[1]), dtype=feat.dtype)
    if HAVE_NUMBA:
        _gather_fwd_jit(feat, y, x, out)
    else:
        _gather_fwd_numpy(feat, y, x, out)
    return out


def gather_backward(g, feat, y, x):
    """Gradients of gather_forward w.r.t. feat and both coordinate fields."""
    gfeat = np.zeros_like(feat)
    gy = np.empty_like(y)
    gx = np.empty_like(x)
    if HAVE_NUMBA:
        _gather_bwd_jit(g, feat, y, x, gfeat, gy, gx)
    else:
        _gather_bwd_numpy(g, feat, y, x, gfeat, gy, gx)
    return gfeat, gy, gx
