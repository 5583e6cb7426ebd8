# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for the pixel-fusion (1x1) and spatial (3x3) convolutions.

Twin of ppcn._kernels_np; ppcn.backend picks one of the two at import time.
1x1 convolutions are GEMMs and go through BLAS; the 3x3 kernels are direct
loops with double-precision accumulators, which keeps summation order fixed
and results reproducible run to run on any machine.
"""

import numpy as np

cimport numpy as cnp
from cython cimport floating
from scipy.linalg.cython_blas cimport dgemm, sgemm

NAME = "compiled"


cdef void _gemm_rm(bint ta, bint tb, int m, int n, int k,
                   floating alpha, floating *a, floating *b,
                   floating beta, floating *c) noexcept nogil:
    """Row-major C(m,n) = alpha * opA(A) @ opB(B) + beta * C.

    ta/tb mean "the stored array is the transpose of the logical operand":
    with ta the array a is stored (k, m) row-major, otherwise (m, k).
    Mapped onto column-major BLAS via C^T = opB(B)^T @ opA(A)^T.
    """
    cdef char ta_c = b'T' if tb else b'N'
    cdef char tb_c = b'T' if ta else b'N'
    cdef int m_c = n
    cdef int n_c = m
    cdef int k_c = k
    cdef int lda = k if tb else n
    cdef int ldb = m if ta else k
    cdef int ldc = n
    if floating is float:
        sgemm(&ta_c, &tb_c, &m_c, &n_c, &k_c, &alpha, b, &lda, a, &ldb, &beta, c, &ldc)
    else:
        dgemm(&ta_c, &tb_c, &m_c, &n_c, &k_c, &alpha, b, &lda, a, &ldb, &beta, c, &ldc)


def gemm_rm(bint ta, bint tb, floating[:, ::1] a, floating[:, ::1] b,
            floating[:, ::1] c, floating alpha=1, floating beta=0):
    """Exposed for backend self-tests; shapes must already be consistent."""
    cdef int m = c.shape[0]
    cdef int n = c.shape[1]
    cdef int k = a.shape[0] if ta else a.shape[1]
    with nogil:
        _gemm_rm(ta, tb, m, n, k, alpha, &a[0, 0], &b[0, 0], beta, &c[0, 0])


def conv1x1_forward(floating[:, :, ::1] x, floating[:, ::1] w,
                    floating[::1] b, floating[:, :, ::1] y):
    """x (N,Ci,HW), w (Co,Ci), b (Co) -> y (N,Co,HW)."""
    cdef Py_ssize_t n = x.shape[0], ci = x.shape[1], hw = x.shape[2]
    cdef Py_ssize_t co = w.shape[0]
    cdef Py_ssize_t s, o, p
    with nogil:
        for s in range(n):
            _gemm_rm(False, False, <int>co, <int>hw, <int>ci,
                     <floating>1, &w[0, 0], &x[s, 0, 0], <floating>0, &y[s, 0, 0])
        for s in range(n):
            for o in range(co):
                for p in range(hw):
                    y[s, o, p] += b[o]


def conv1x1_backward(floating[:, :, ::1] x, floating[:, ::1] w,
                     floating[:, :, ::1] gy, floating[:, :, ::1] gx,
                     floating[:, ::1] gw, floating[::1] gb):
    cdef Py_ssize_t n = x.shape[0], ci = x.shape[1], hw = x.shape[2]
    cdef Py_ssize_t co = w.shape[0]
    cdef Py_ssize_t s, o, p
    cdef double acc
    cdef floating beta
    with nogil:
        for s in range(n):
            _gemm_rm(True, False, <int>ci, <int>hw, <int>co,
                     <floating>1, &w[0, 0], &gy[s, 0, 0], <floating>0, &gx[s, 0, 0])
        beta = <floating>0
        for s in range(n):
            _gemm_rm(False, True, <int>co, <int>ci, <int>hw,
                     <floating>1, &gy[s, 0, 0], &x[s, 0, 0], beta, &gw[0, 0])
            beta = <floating>1
        for o in range(co):
            acc = 0
            for s in range(n):
                for p in range(hw):
                    acc += gy[s, o, p]
            gb[o] = <floating>acc


def conv3x3_forward(floating[:, :, :, ::1] x, floating[:, :, :, ::1] w,
                    floating[::1] b, floating[:, :, :, ::1] y):
    """Zero padding 1, stride 1. x (N,Ci,H,W), w (Co,Ci,3,3) -> y (N,Co,H,W)."""
    cdef Py_ssize_t n = x.shape[0], ci = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t co = w.shape[0]
    cdef Py_ssize_t s, o, i, hy, hx, ky, kx, iy, ix
    cdef double acc
    with nogil:
        for s in range(n):
            for o in range(co):
                for hy in range(h):
                    for hx in range(wd):
                        acc = b[o]
                        for i in range(ci):
                            for ky in range(3):
                                iy = hy + ky - 1
                                if iy < 0 or iy >= h:
                                    continue
                                for kx in range(3):
                                    ix = hx + kx - 1
                                    if 0 <= ix < wd:
                                        acc += w[o, i, ky, kx] * x[s, i, iy, ix]
                        y[s, o, hy, hx] = <floating>acc


def conv3x3_backward(floating[:, :, :, ::1] x, floating[:, :, :, ::1] w,
                     floating[:, :, :, ::1] gy, floating[:, :, :, ::1] gx,
                     floating[:, :, :, ::1] gw, floating[::1] gb):
    cdef Py_ssize_t n = x.shape[0], ci = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t co = w.shape[0]
    cdef Py_ssize_t s, o, i, hy, hx, ky, kx, iy, ix
    cdef double acc
    with nogil:
        for s in range(n):
            for i in range(ci):
                for hy in range(h):
                    for hx in range(wd):
                        acc = 0
                        for o in range(co):
                            for ky in range(3):
                                iy = hy + 1 - ky
                                if iy < 0 or iy >= h:
                                    continue
                                for kx in range(3):
                                    ix = hx + 1 - kx
                                    if 0 <= ix < wd:
                                        acc += w[o, i, ky, kx] * gy[s, o, iy, ix]
                        gx[s, i, hy, hx] = <floating>acc
        for o in range(co):
            for i in range(ci):
                for ky in range(3):
                    for kx in range(3):
                        acc = 0
                        for s in range(n):
                            for hy in range(h):
                                iy = hy + ky - 1
                                if iy < 0 or iy >= h:
                                    continue
                                for hx in range(wd):
                                    ix = hx + kx - 1
                                    if 0 <= ix < wd:
                                        acc += gy[s, o, hy, hx] * x[s, i, iy, ix]
                        gw[o, i, ky, kx] = <floating>acc
        for o in range(co):
            acc = 0
            for s in range(n):
                for hy in range(h):
                    for hx in range(wd):
                        acc += gy[s, o, hy, hx]
            gb[o] = <floating>acc
