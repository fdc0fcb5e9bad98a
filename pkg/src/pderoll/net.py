"""Residual convolutional denoiser with exact hand-written reverse-mode gradients.

The C+F temporal frames of a segment are stacked into the channel dimension
(channels-last). Per-frame noise levels enter twice: as broadcast input
channels (normalized level + condition indicator) and as a sinusoidal
embedding driving a per-block scale/shift modulation. The final layer is
zero-initialized so an untrained net predicts zero noise.

All parameters live in one flat vector; `layout` maps names to slices of it.
Forward/backward are pure functions of (params, inputs) and are exercised
against central finite differences in the test suite.
"""

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels as K
from .errors import DataError, NumericFailure

CHECKPOINT_MAGIC = b"PDEW"
CHECKPOINT_VERSION = 1


@dataclass
class NetConfig:
    frames: int                  # C + F
    channels: int                # field channels c
    hidden_channels: int = 64
    depth: int = 6               # residual blocks
    kernel: int = 3
    embed_dim: int = 16
    level_scale: int = 1000      # S_train of the paired noise schedule
    time_mixing: str = "frame_stack"
    dtype: str = "float32"       # float64 for gradient-check builds

    def __post_init__(self):
        if self.time_mixing != "frame_stack":
            raise ValueError(f"unsupported time_mixing {self.time_mixing!r}")
        if self.embed_dim % 2:
            raise ValueError("embed_dim must be even")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def in_channels(self):
        # stacked frames + per-frame level channel + per-frame condition mask
        return self.frames * self.channels + 2 * self.frames

    @property
    def out_channels(self):
        return self.frames * self.channels

    def digest(self) -> int:
        """Stable 64-bit fingerprint of the layout-defining fields."""
        key = (f"{self.frames},{self.channels},{self.hidden_channels},{self.depth},"
               f"{self.kernel},{self.embed_dim},{self.level_scale},{self.time_mixing}")
        return int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "little")


def layout(cfg: NetConfig):
    """Ordered (name, shape) list of every parameter tensor."""
    k, h = cfg.kernel, cfg.hidden_channels
    fe = cfg.frames * cfg.embed_dim
    out = [("stem_w", (k * k * cfg.in_channels, h)), ("stem_b", (h,))]
    for i in range(cfg.depth):
        out.append((f"block{i}_conv_w", (k * k * h, h)))
        out.append((f"block{i}_conv_b", (h,)))
        out.append((f"block{i}_film_w", (fe, 2 * h)))
        out.append((f"block{i}_film_b", (2 * h,)))
    out.append(("head_w", (k * k * h, cfg.out_channels)))
    out.append(("head_b", (cfg.out_channels,)))
    return out


def param_count(cfg: NetConfig) -> int:
    return sum(int(np.prod(s)) for _, s in layout(cfg))


@dataclass
class DenoiserParams:
    cfg: NetConfig
    vector: np.ndarray
    views: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.views:
            off = 0
            for name, shape in layout(self.cfg):
                n = int(np.prod(shape))
                self.views[name] = self.vector[off:off + n].reshape(shape)
                off += n
            if off != self.vector.size:
                raise ValueError(f"parameter vector has {self.vector.size} entries, layout needs {off}")

    def __getitem__(self, name):
        return self.views[name]

    def __setitem__(self, name, value):
        self.views[name][...] = value

    def copy(self):
        return DenoiserParams(self.cfg, self.vector.copy())


def init_params(cfg: NetConfig, seed: int) -> DenoiserParams:
    """Fan-in-scaled Gaussian init; output layer zeroed; deterministic in seed."""
    rng = np.random.default_rng(seed)
    chunks = []
    for name, shape in layout(cfg):
        n = int(np.prod(shape))
        if name.endswith("_b") or name.startswith("head"):
            chunks.append(np.zeros(n))
        else:
            fan_in = shape[0]
            chunks.append(rng.standard_normal(n) / np.sqrt(fan_in))
    vec = np.concatenate(chunks).astype(cfg.np_dtype)
    return DenoiserParams(cfg, vec)


def noise_embedding(levels, embed_dim):
    """Sinusoidal embedding of integer noise indices; index 0 maps to [0...,1...]."""
    half = embed_dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = np.asarray(levels, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def _as_batched(segment, levels, mask, cfg):
    seg = np.asarray(segment)
    squeeze = seg.ndim == 4
    if squeeze:
        seg = seg[None]
    B = seg.shape[0]
    if seg.shape[1:] != (cfg.frames,) + seg.shape[2:4] + (cfg.channels,) or seg.ndim != 5:
        raise ValueError(f"segment shape {np.asarray(segment).shape} does not match "
                         f"frames={cfg.frames}, channels={cfg.channels}")
    lv = np.broadcast_to(np.asarray(levels), (B, cfg.frames))
    mk = np.broadcast_to(np.asarray(mask, dtype=bool), (B, cfg.frames))
    return seg, lv, mk, squeeze


def _pack(seg, lv, mk, cfg):
    """(B,T,ny,nx,c) -> channels-last net input (B,ny,nx,T*c + 2T)."""
    B, T, ny, nx, c = seg.shape
    dt = cfg.np_dtype
    xin = np.moveaxis(seg, 1, 3).reshape(B, ny, nx, T * c)
    lvl = np.broadcast_to((lv / cfg.level_scale).astype(dt)[:, None, None, :], (B, ny, nx, T))
    msk = np.broadcast_to(mk.astype(dt)[:, None, None, :], (B, ny, nx, T))
    return np.ascontiguousarray(np.concatenate([xin.astype(dt, copy=False), lvl, msk], axis=3))


def _unpack(y, cfg, ny, nx):
    B = y.shape[0]
    return np.moveaxis(y.reshape(B, ny, nx, cfg.frames, cfg.channels), 3, 1)


def _forward_cached(params: DenoiserParams, seg, lv, mk, want_grad=False):
    """Forward pass; with want_grad the cache carries each block's GELU
    derivative (computed in the same transcendental sweep as the value)."""
    cfg = params.cfg
    k = cfg.kernel
    z0 = _pack(seg, lv, mk, cfg)
    embf = np.ascontiguousarray(
        noise_embedding(lv, cfg.embed_dim).reshape(lv.shape[0], -1).astype(cfg.np_dtype))
    h = K.conv2d(z0, params["stem_w"], params["stem_b"], k)
    blocks = []
    for i in range(cfg.depth):
        u = K.conv2d(h, params[f"block{i}_conv_w"], params[f"block{i}_conv_b"], k)
        film = embf @ params[f"block{i}_film_w"] + params[f"block{i}_film_b"]
        gamma, beta = film[:, :cfg.hidden_channels], film[:, cfg.hidden_channels:]
        v = u * (1.0 + gamma[:, None, None, :]) + beta[:, None, None, :]
        if want_grad:
            a, dact = K.gelu_with_grad(v)
        else:
            a, dact = K.gelu(v), None
        blocks.append((h, u, v, gamma, dact))
        h = h + a
    y = K.conv2d(h, params["head_w"], params["head_b"], k)
    cache = {"z0": z0, "embf": embf, "blocks": blocks, "h_last": h}
    return _unpack(y, cfg, seg.shape[2], seg.shape[3]), cache


def _check_finite(out, cache):
    if np.isfinite(out).all():
        return
    names = ["stem"] + [f"block{i}" for i in range(len(cache["blocks"]))] + ["head"]
    tensors = [cache["blocks"][0][0] if cache["blocks"] else cache["h_last"]]
    for (h, u, v, g, dact) in cache["blocks"]:
        tensors.append(v)
    tensors.append(out)
    for name, t in zip(names, tensors):
        if not np.isfinite(t).all():
            raise NumericFailure(f"non-finite activations in layer {name!r}")
    raise NumericFailure("non-finite activations in layer 'head'")


def forward(params: DenoiserParams, segment, noise_levels, cond_mask):
    """Noise estimate for every frame of the segment.

    segment: (C+F, ny, nx, c) or batched (B, C+F, ny, nx, c); returns the
    same shape. Condition-frame outputs are computed but carry no meaning.
    """
    seg, lv, mk, squeeze = _as_batched(segment, noise_levels, cond_mask, params.cfg)
    out, cache = _forward_cached(params, seg, lv, mk)
    _check_finite(out, cache)
    return out[0] if squeeze else out


def _backward_cached(params: DenoiserParams, cache, cot):
    """Gradient of <forward, cot> wrt params, reusing a forward cache."""
    cfg = params.cfg
    k, H = cfg.kernel, cfg.hidden_channels
    B, ny, nx = cache["z0"].shape[0], cache["z0"].shape[1], cache["z0"].shape[2]
    embf = cache["embf"]
    grad = DenoiserParams(cfg, np.zeros_like(params.vector))

    dY = np.ascontiguousarray(
        np.moveaxis(cot.astype(cfg.np_dtype, copy=False), 1, 3).reshape(B, ny, nx, -1))
    dw, db = K.conv2d_grad_params(cache["h_last"], dY, k)
    grad["head_w"] += dw
    grad["head_b"] += db
    dh = K.conv2d_grad_input(dY, params["head_w"], k, H)

    for i in reversed(range(cfg.depth)):
        h_in, u, v, gamma, dact = cache["blocks"][i]
        # residual: dh reaches both the skip and the block path
        dv = dact * dh if dact is not None else K.gelu_grad(v, dh)
        dgamma = np.einsum("byxh,byxh->bh", dv, u)
        dbeta = dv.sum(axis=(1, 2))
        dfilm = np.concatenate([dgamma, dbeta], axis=1)
        grad[f"block{i}_film_w"] += embf.T @ dfilm
        grad[f"block{i}_film_b"] += dfilm.sum(axis=0)
        du = dv * (1.0 + gamma[:, None, None, :])
        dw, db = K.conv2d_grad_params(h_in, du, k)
        grad[f"block{i}_conv_w"] += dw
        grad[f"block{i}_conv_b"] += db
        dh = dh + K.conv2d_grad_input(du, params[f"block{i}_conv_w"], k, H)

    dw, db = K.conv2d_grad_params(cache["z0"], dh, k)
    grad["stem_w"] += dw
    grad["stem_b"] += db

    if not np.isfinite(grad.vector).all():
        raise NumericFailure("non-finite parameter gradients")
    return grad.vector


def backward(params: DenoiserParams, segment, noise_levels, cond_mask, output_cotangent):
    """Exact reverse-mode gradient of <forward(...), output_cotangent> wrt params."""
    seg, lv, mk, squeeze = _as_batched(segment, noise_levels, cond_mask, params.cfg)
    cot = np.asarray(output_cotangent)
    if squeeze:
        cot = cot[None]
    if cot.shape != seg.shape:
        raise ValueError(f"cotangent shape {cot.shape} != segment shape {seg.shape}")
    out, cache = _forward_cached(params, seg, lv, mk)
    _check_finite(out, cache)
    return _backward_cached(params, cache, cot)


class Denoiser:
    """Bundles params with a forward-call counter; the sampler's model interface."""

    def __init__(self, params: DenoiserParams):
        self.params = params
        self.cfg = params.cfg
        self.forward_calls = 0

    def predict_noise(self, segment, noise_levels, cond_mask):
        self.forward_calls += 1
        return forward(self.params, segment, noise_levels, cond_mask)

    def value_and_grad(self, segment, noise_levels, cond_mask, cot_fn):
        """Run forward once, derive (value, cotangent) via cot_fn, return grads too."""
        seg, lv, mk, squeeze = _as_batched(segment, noise_levels, cond_mask, self.cfg)
        self.forward_calls += 1
        out, cache = _forward_cached(self.params, seg, lv, mk, want_grad=True)
        _check_finite(out, cache)
        value, cot = cot_fn(out[0] if squeeze else out)
        if squeeze:
            cot = cot[None]
        return value, _backward_cached(self.params, cache, cot)


def save_checkpoint(path, params: DenoiserParams):
    """Write the "PDEW" checkpoint: magic, version, config digest, f32 weights."""
    vec = params.vector.astype("<f4")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<HQQ", CHECKPOINT_VERSION, params.cfg.digest(), vec.size))
        f.write(vec.tobytes())


def load_checkpoint(path, cfg: NetConfig) -> DenoiserParams:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: bad checkpoint magic {blob[:4]!r}")
    version, digest, count = struct.unpack_from("<HQQ", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    if digest != cfg.digest():
        raise DataError(f"{path}: checkpoint config digest mismatch")
    payload = blob[22:]
    if len(payload) < 4 * count:
        raise DataError(f"{path}: truncated checkpoint payload")
    vec = np.frombuffer(payload[:4 * count], dtype="<f4").astype(cfg.np_dtype)
    if count != param_count(cfg):
        raise DataError(f"{path}: weight count {count} != layout count {param_count(cfg)}")
    return DenoiserParams(cfg, vec)
