"""Hot-kernel backend selection and the periodic conv primitives.

Two interchangeable backends supply the inner kernels (patch gathering and
GELU): a compiled Cython extension and a pure-numpy fallback. The compiled
one is picked automatically when its import succeeds; `set_backend` switches
explicitly (used by the parity tests and the benchmark). The convolution
wrappers below are backend-independent: they do the im2col through the
selected backend and leave the contractions to BLAS.

Layout conventions (channels-last everywhere):
  activations  (B, H, W, C)
  conv weights (k*k*Cin, Cout), row index (a*k + b)*Cin + c
  patches      (B*H*W, k*k*Cin), same column layout
"""

import threading

import numpy as np

from . import fallback

try:
    from . import _conv_ext
    HAVE_EXT = True
except ImportError:
    _conv_ext = None
    HAVE_EXT = False

_BACKENDS = {"numpy": fallback}
if HAVE_EXT:
    _BACKENDS["ext"] = _conv_ext

_active_name = "ext" if HAVE_EXT else "numpy"
_active = _BACKENDS[_active_name]


def get_backend():
    return _active_name


def set_backend(name):
    """Select 'ext' or 'numpy'. Raises ValueError for unknown/unbuilt names."""
    global _active, _active_name
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; built: {sorted(_BACKENDS)}")
    _active_name = name
    _active = _BACKENDS[name]


_scratch = threading.local()


def _patch_buffer(rows, cols, dtype):
    """Reused per-thread im2col scratch; callers consume it before the next call."""
    pool = getattr(_scratch, "pool", None)
    if pool is None:
        pool = _scratch.pool = {}
    key = (rows, cols, np.dtype(dtype).str)
    buf = pool.get(key)
    if buf is None:
        buf = pool[key] = np.empty((rows, cols), dtype=dtype)
    return buf


def im2col(x, k, reuse=False):
    """Periodic k x k patches of x (B,H,W,C) -> (B*H*W, k*k*C).

    With reuse=True the returned array is a per-thread scratch buffer that
    is only valid until the next reuse=True call of the same shape.
    """
    B, H, W, C = x.shape
    rows, cols = B * H * W, k * k * C
    out = _patch_buffer(rows, cols, x.dtype) if reuse \
        else np.empty((rows, cols), dtype=x.dtype)
    _active.im2col(np.ascontiguousarray(x), k, out)
    return out


def gelu(x):
    out = np.empty_like(x)
    _active.gelu(x.reshape(-1), out.reshape(-1))
    return out


def gelu_grad(x, dy):
    out = np.empty_like(x)
    _active.gelu_grad(x.reshape(-1), dy.reshape(-1), out.reshape(-1))
    return out


def gelu_with_grad(x):
    """(GELU(x), GELU'(x)) in one pass; one transcendental sweep instead of two."""
    out = np.empty_like(x)
    dout = np.empty_like(x)
    _active.gelu_with_grad(x.reshape(-1), out.reshape(-1), dout.reshape(-1))
    return out, dout


def conv2d(x, wmat, bias, k):
    """Periodic cross-correlation: x (B,H,W,Cin) -> (B,H,W,Cout)."""
    B, H, W, _ = x.shape
    y = im2col(x, k, reuse=True) @ wmat
    y += bias
    return y.reshape(B, H, W, wmat.shape[1])


def conv2d_grad_input(dy, wmat, k, cin):
    """Gradient of conv2d wrt its input, given dy (B,H,W,Cout)."""
    B, H, W, cout = dy.shape
    w4 = wmat.reshape(k, k, cin, cout)
    wt = np.ascontiguousarray(w4[::-1, ::-1].transpose(0, 1, 3, 2)).reshape(k * k * cout, cin)
    dx = im2col(dy, k, reuse=True) @ wt
    return dx.reshape(B, H, W, cin)


def conv2d_grad_params(x, dy, k):
    """Gradients of conv2d wrt (wmat, bias)."""
    cout = dy.shape[3]
    dw = im2col(x, k, reuse=True).T @ dy.reshape(-1, cout)
    db = dy.sum(axis=(0, 1, 2))
    return dw, db
