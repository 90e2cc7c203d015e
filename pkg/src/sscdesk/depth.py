"""Depth refinement: mono and stereo depth features exchanged through
windowed cross-attention, then fused into a per-pixel depth distribution."""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import tensor as T
from .errors import ShapeMismatch
from .nn import ParamBuilder, conv, linear
from .tensor import Tensor

MASKED = -1e9


def init_depth_params(pb: ParamBuilder, c_img: int, c_d: int, depth_bins: int, prefix="depth"):
    pb.conv(f"{prefix}.mono.0", (3, 3), c_img, c_d)
    pb.conv(f"{prefix}.mono.1", (3, 3), c_d, c_d)
    pb.conv(f"{prefix}.stereo.0", (3, 3), 1, c_d)
    pb.conv(f"{prefix}.stereo.1", (3, 3), c_d, c_d)
    for direction in ("m", "s"):
        for proj in ("q", "k", "v"):
            pb.linear(f"{prefix}.attn_{direction}.{proj}", c_d, c_d, bias=False)
    pb.conv(f"{prefix}.fuse.0", (3, 3), 2 * c_d, c_d)
    pb.conv(f"{prefix}.fuse.1", (1, 1), c_d, depth_bins)


def mono_depth_features(image_features: Tensor, params, prefix="depth"):
    h = conv(image_features, params, f"{prefix}.mono.0").relu()
    return conv(h, params, f"{prefix}.mono.1")


def encode_stereo_depth(depth_map, params, prefix="depth", scale=1.0, shape=None):
    """Several convolutions over the ``H x W`` stereo depth map -> ``H x W x C_d``."""
    d = T.as_tensor(depth_map)
    if d.ndim != 2 or (shape is not None and d.shape != tuple(shape)):
        raise ShapeMismatch(f"depth map has shape {d.shape}, expected {shape}")
    x = (d * scale).reshape(d.shape + (1,))
    h = conv(x, params, f"{prefix}.stereo.0").relu()
    return conv(h, params, f"{prefix}.stereo.1")


@lru_cache(maxsize=32)
def neighborhood_index(H: int, W: int, window: int):
    """Flat neighbour index ``(H*W, window**2)`` and additive mask.

    Out-of-image neighbours point at row ``H*W`` (a zero row) and carry a
    large negative score so the softmax ignores them.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be odd and >= 1")
    r = window // 2
    v, u = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    dv, du = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
    nv = v.reshape(-1, 1) + dv.reshape(1, -1)
    nu = u.reshape(-1, 1) + du.reshape(1, -1)
    ok = (nv >= 0) & (nv < H) & (nu >= 0) & (nu < W)
    idx = np.where(ok, nv * W + nu, H * W)
    bias = np.where(ok, 0.0, MASKED)
    idx.setflags(write=False)
    bias.setflags(write=False)
    return idx, bias


def neighborhood_cross_attention(q_map, kv_map, window: int, params, name: str, return_weights=False):
    """Single-head attention of each pixel over the in-image ``window x window``
    neighbourhood of ``kv_map``."""
    if q_map.shape != kv_map.shape:
        raise ShapeMismatch(f"query map {q_map.shape} != key/value map {kv_map.shape}")
    H, W, C = q_map.shape
    idx, bias = neighborhood_index(H, W, window)
    q = linear(q_map.reshape(H * W, C), params, f"{name}.q")
    kv = kv_map.reshape(H * W, C)
    zero = Tensor(np.zeros((1, C), dtype=kv.dtype))
    k = T.concat([linear(kv, params, f"{name}.k"), zero], axis=0)
    v = T.concat([linear(kv, params, f"{name}.v"), zero], axis=0)
    kn = T.take(k, idx)
    vn = T.take(v, idx)
    scores = (kn * q.reshape(H * W, 1, C)).sum(axis=-1) * (1.0 / np.sqrt(C)) + bias.astype(kv.dtype)
    a = T.softmax(scores, axis=-1)
    out = (vn * a.reshape(H * W, window * window, 1)).sum(axis=1).reshape(H, W, C)
    return (out, a) if return_weights else out


def exchange_features(d_m, d_s, window, params, prefix="depth"):
    """Mono attends to stereo and stereo to mono, symmetrically."""
    m_hat = neighborhood_cross_attention(d_m, d_s, window, params, f"{prefix}.attn_m")
    s_hat = neighborhood_cross_attention(d_s, d_m, window, params, f"{prefix}.attn_s")
    return m_hat, s_hat


def fuse_depth(mono_hat, stereo_hat, params, prefix="depth"):
    """Concatenate both refined volumes and predict a softmax over depth bins."""
    if mono_hat.shape != stereo_hat.shape:
        raise ShapeMismatch(f"{mono_hat.shape} != {stereo_hat.shape}")
    h = T.concat([mono_hat, stereo_hat], axis=-1)
    h = conv(h, params, f"{prefix}.fuse.0").relu()
    return T.softmax(conv(h, params, f"{prefix}.fuse.1"), axis=-1)


def refine_depth(image_features, stereo_depth_map, params, window=5, prefix="depth", depth_scale=1.0):
    """Image features + stereo depth map -> ``H x W x D_bins`` depth probability.

    Both attention directions read the features from before either update.
    """
    d_m = mono_depth_features(image_features, params, prefix)
    d_s = encode_stereo_depth(stereo_depth_map, params, prefix, scale=depth_scale, shape=d_m.shape[:2])
    m_hat, s_hat = exchange_features(d_m, d_s, window, params, prefix)
    return fuse_depth(m_hat, s_hat, params, prefix)
