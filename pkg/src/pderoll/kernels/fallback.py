"""Pure-numpy implementations of the hot kernels.

Semantics match _conv_ext exactly (same layouts, same math); used when the
compiled extension is unavailable or explicitly deselected.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


def im2col(x, k, out):
    """Gather k x k periodic patches of a channels-last (B,H,W,C) batch.

    Writes into out of shape (B*H*W, k*k*C); column layout (a*k + b)*C + c.
    """
    B, H, W, C = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)), mode="wrap")
    # windows: (B, H, W, C, k, k) -> (B, H, W, k, k, C)
    win = sliding_window_view(xp, (k, k), axis=(1, 2))
    np.copyto(out.reshape(B, H, W, k, k, C), np.moveaxis(win, 3, 5))


def gelu(x, out):
    v = x.astype(np.float64, copy=False)
    np.copyto(out, (0.5 * v * (1.0 + erf(v * _INV_SQRT2))).astype(x.dtype, copy=False))


def gelu_with_grad(x, out, dout):
    v = x.astype(np.float64, copy=False)
    phi_c = 0.5 * (1.0 + erf(v * _INV_SQRT2))
    dens = np.exp(-0.5 * v * v) * _INV_SQRT2PI
    np.copyto(out, (v * phi_c).astype(x.dtype, copy=False))
    np.copyto(dout, (phi_c + v * dens).astype(x.dtype, copy=False))


def gelu_grad(x, dy, out):
    v = x.astype(np.float64, copy=False)
    d = 0.5 * (1.0 + erf(v * _INV_SQRT2)) + v * np.exp(-0.5 * v * v) * _INV_SQRT2PI
    np.copyto(out, (d * dy.astype(np.float64, copy=False)).astype(x.dtype, copy=False))
