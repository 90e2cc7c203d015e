"""Local (voxel) and global (tri-plane) encoding of the transformed volume,
their per-voxel dynamic fusion, and the class-logit head."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import IndivisibleGroups, ShapeMismatch
from .nn import ParamBuilder, add_residual_block, conv, residual_block
from .tensor import Tensor

AXES = {"X": 0, "Y": 1, "Z": 2}
# plane name -> pooled axis; the plane keeps the other two axes in order
PLANES = {"xy": 2, "xz": 1, "yz": 0}


@dataclass
class TpvPlanes:
    xy: Tensor
    xz: Tensor
    yz: Tensor


def init_encoder_params(pb: ParamBuilder, channels, num_classes, groups=2, n_blocks=2, prefix="lge"):
    for i in range(n_blocks):
        add_residual_block(pb, f"{prefix}.voxel.{i}", (3, 3, 3), channels)
    for plane in PLANES:
        pb.conv(f"{prefix}.s2c.{plane}", (1, 1), groups * channels, channels)
        for i in range(n_blocks):
            add_residual_block(pb, f"{prefix}.tpv.{plane}.{i}", (3, 3), channels)
    pb.conv(f"{prefix}.fuse", (1, 1, 1), channels, 4)
    pb.conv(f"{prefix}.head", (1, 1, 1), channels, num_classes)


def voxel_branch(volume, params, prefix="lge", n_blocks=2):
    for i in range(n_blocks):
        volume = residual_block(volume, params, f"{prefix}.voxel.{i}")
    return volume


def _axis(axis):
    return AXES[axis.upper()] if isinstance(axis, str) else int(axis)


def group_pool_stage(volume, axis, groups):
    """Split ``axis`` into ``groups`` contiguous slabs, max over each slab and
    stack the slabs on channels (group-major): ``(A, B, groups * C)``."""
    ax = _axis(axis)
    X, Y, Z, C = volume.shape
    extent = volume.shape[ax]
    if groups < 1 or extent % groups:
        raise IndivisibleGroups(f"axis of extent {extent} cannot be split into {groups} groups")
    keep = [a for a in range(3) if a != ax]
    v = volume.transpose(keep + [ax, 3])
    A, B = v.shape[:2]
    v = v.reshape(A, B, groups, extent // groups, C).max(axis=3)
    return v.reshape(A, B, groups * C)


def group_s2c_pool(volume, axis, groups, params, name):
    """Grouped spatial-to-channel max pooling followed by a 1x1 conv back to C channels."""
    return conv(group_pool_stage(volume, axis, groups), params, name, pad=0)


def tpv_branch(volume, groups, params, prefix="lge", n_blocks=2) -> TpvPlanes:
    out = {}
    for plane, ax in PLANES.items():
        h = group_s2c_pool(volume, ax, groups, params, f"{prefix}.s2c.{plane}")
        for i in range(n_blocks):
            h = residual_block(h, params, f"{prefix}.tpv.{plane}.{i}")
        out[plane] = h
    return TpvPlanes(**out)


def fusion_weights(f_voxel, params, prefix="lge"):
    return T.softmax(conv(f_voxel, params, f"{prefix}.fuse", pad=0), axis=-1)


def dynamic_fuse(f_voxel, planes: TpvPlanes, params, prefix="lge", return_weights=False):
    """Per-voxel softmax blend of the voxel branch and the broadcast planes."""
    X, Y, Z, C = f_voxel.shape
    expect = {"xy": (X, Y, C), "xz": (X, Z, C), "yz": (Y, Z, C)}
    for name, shape in expect.items():
        if getattr(planes, name).shape != shape:
            raise ShapeMismatch(f"plane {name} has shape {getattr(planes, name).shape}, expected {shape}")
    w = fusion_weights(f_voxel, params, prefix)
    branches = [
        f_voxel,
        planes.xy.reshape(X, Y, 1, C),
        planes.xz.reshape(X, 1, Z, C),
        planes.yz.reshape(1, Y, Z, C),
    ]
    out = None
    for i, f in enumerate(branches):
        term = T.take(w, np.array([i]), axis=3) * f
        out = term if out is None else out + term
    return (out, w) if return_weights else out


def upsample2x(x):
    """Double every spatial axis by linear interpolation (edge-clamped).

    Output index ``2i`` is exactly input ``i``.
    """
    for ax in range(x.ndim - 1):
        n = x.shape[ax]
        nxt = T.take(x, np.minimum(np.arange(n) + 1, n - 1), axis=ax)
        mid = (x + nxt) * 0.5
        shape = list(x.shape)
        shape.insert(ax + 1, 1)
        pair = T.concat([x.reshape(shape), mid.reshape(shape)], axis=ax + 1)
        shape = list(x.shape)
        shape[ax] = 2 * n
        x = pair.reshape(shape)
    return x


def decode_head(f_final, params, prefix="lge", upsample=False):
    """Per-voxel class logits, optionally at twice the resolution."""
    logits = conv(f_final, params, f"{prefix}.head", pad=0)
    return upsample2x(logits) if upsample else logits


def run_lge(volume, params, groups=2, prefix="lge", n_blocks=2, upsample=False, trace=None):
    f_voxel = voxel_branch(volume, params, prefix, n_blocks)
    planes = tpv_branch(volume, groups, params, prefix, n_blocks)
    fused = dynamic_fuse(f_voxel, planes, params, prefix)
    if trace is not None:
        trace.update(f_voxel=f_voxel, planes=planes, f_final=fused)
    return decode_head(fused, params, prefix, upsample)
