"""Pure numpy implementations of the convolution kernels.

This is the fallback backend: every function here has a compiled twin in
ppcn._core with identical signatures and semantics. Shapes follow the
(N, C, H, W) layout used everywhere in the package. Inputs are never
modified; outputs are freshly allocated.

conv3x3 uses zero padding of one pixel and stride one, expressed as nine
shifted 1x1 products so the work lands in BLAS instead of python loops.
"""

from __future__ import annotations

import numpy as np

NAME = "python"


def conv1x1_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    n, ci, h, wd = x.shape
    co = w.shape[0]
    y = np.matmul(w, x.reshape(n, ci, h * wd))
    y += b[:, None]
    return y.reshape(n, co, h, wd)


def conv1x1_backward(x, w, gy):
    """Returns (gx, gw, gb) for y = w @ x + b applied per pixel."""
    n, ci, h, wd = x.shape
    xf = x.reshape(n, ci, h * wd)
    gf = gy.reshape(n, w.shape[0], h * wd)
    gx = np.matmul(w.T, gf).reshape(x.shape)
    gw = np.matmul(gf, xf.transpose(0, 2, 1)).sum(axis=0)
    gb = gy.sum(axis=(0, 2, 3))
    return gx, gw, gb


def conv3x3_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    n, ci, h, wd = x.shape
    co = w.shape[0]
    xp = np.zeros((n, ci, h + 2, wd + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    acc = np.zeros((n, co, h * wd), dtype=x.dtype)
    for ky in range(3):
        for kx in range(3):
            win = np.ascontiguousarray(xp[:, :, ky : ky + h, kx : kx + wd]).reshape(n, ci, h * wd)
            acc += np.matmul(w[:, :, ky, kx], win)
    acc += b[:, None]
    return acc.reshape(n, co, h, wd)


def conv3x3_backward(x, w, gy):
    n, ci, h, wd = x.shape
    co = w.shape[0]
    xp = np.zeros((n, ci, h + 2, wd + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    gf = gy.reshape(n, co, h * wd)
    gxp = np.zeros_like(xp)
    gw = np.empty_like(w)
    for ky in range(3):
        for kx in range(3):
            win = np.ascontiguousarray(xp[:, :, ky : ky + h, kx : kx + wd]).reshape(n, ci, h * wd)
            gw[:, :, ky, kx] = np.matmul(gf, win.transpose(0, 2, 1)).sum(axis=0)
            gtap = np.matmul(w[:, :, ky, kx].T, gf).reshape(n, ci, h, wd)
            gxp[:, :, ky : ky + h, kx : kx + wd] += gtap
    gx = gxp[:, :, 1:-1, 1:-1].copy()
    gb = gy.sum(axis=(0, 2, 3))
    return gx, gw, gb
