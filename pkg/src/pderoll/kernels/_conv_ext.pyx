# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels for the denoiser's periodic convolutions.

Only the data-movement / elementwise pieces live here; the surrounding
GEMMs stay in BLAS. A pure-numpy fallback with identical semantics lives
in fallback.py and is parity-tested against this module.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport erf, exp, sqrt
from libc.string cimport memcpy

cnp.import_array()

ctypedef fused real:
    float
    double

cdef double INV_SQRT2 = 0.7071067811865476
cdef double INV_SQRT2PI = 0.3989422804014327


def im2col(real[:, :, :, ::1] x, int k, real[:, ::1] out):
    """Gather k x k periodic patches of a channels-last batch.

    x:   (B, H, W, C) C-contiguous
    out: (B*H*W, k*k*C), row r = b*H*W + i*W + j, column block (a*k + b2)*C + c
         holding x[b, (i + a - k//2) mod H, (j + b2 - k//2) mod W, c].
    """
    cdef Py_ssize_t B = x.shape[0], H = x.shape[1], W = x.shape[2], C = x.shape[3]
    cdef Py_ssize_t p = k // 2
    cdef Py_ssize_t b, i, j, a, b2, row, col
    cdef Py_ssize_t[:, ::1] iy = np.empty((H, k), dtype=np.intp)
    cdef Py_ssize_t[:, ::1] ix = np.empty((W, k), dtype=np.intp)
    # cdivision is on: bias the operand so C's % never sees a negative value
    for i in range(H):
        for a in range(k):
            iy[i, a] = (i + a - p + k * H) % H
    for j in range(W):
        for a in range(k):
            ix[j, a] = (j + a - p + k * W) % W
    with nogil:
        for b in range(B):
            for i in range(H):
                for j in range(W):
                    row = (b * H + i) * W + j
                    col = 0
                    for a in range(k):
                        for b2 in range(k):
                            memcpy(&out[row, col], &x[b, iy[i, a], ix[j, b2], 0],
                                   C * sizeof(real))
                            col += C
    return None


def gelu(real[::1] x, real[::1] out):
    """Exact (erf-based) GELU, elementwise over a flat view."""
    cdef Py_ssize_t n = x.shape[0], i
    cdef double v
    with nogil:
        for i in range(n):
            v = <double>x[i]
            out[i] = <real>(0.5 * v * (1.0 + erf(v * INV_SQRT2)))
    return None


def gelu_with_grad(real[::1] x, real[::1] out, real[::1] dout):
    """GELU value and its derivative in one pass (erf and exp computed once)."""
    cdef Py_ssize_t n = x.shape[0], i
    cdef double v, phi_c, dens
    with nogil:
        for i in range(n):
            v = <double>x[i]
            phi_c = 0.5 * (1.0 + erf(v * INV_SQRT2))
            dens = exp(-0.5 * v * v) * INV_SQRT2PI
            out[i] = <real>(v * phi_c)
            dout[i] = <real>(phi_c + v * dens)
    return None


def gelu_grad(real[::1] x, real[::1] dy, real[::1] out):
    """d/dx GELU(x) * dy, elementwise over flat views."""
    cdef Py_ssize_t n = x.shape[0], i
    cdef double v, d
    with nogil:
        for i in range(n):
            v = <double>x[i]
            d = 0.5 * (1.0 + erf(v * INV_SQRT2)) + v * exp(-0.5 * v * v) * INV_SQRT2PI
            out[i] = <real>(d * <double>dy[i])
    return None
