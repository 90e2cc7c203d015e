"""Image-to-voxel view transformation with context-dependent queries.

The frustum volume is stored as ``(H, W, D_bins, C)`` so its lattice axes
are ``(v, u, b)``.  Reference points are kept in ``(u, v, b)`` order as the
camera produces them and swapped to lattice order right before sampling.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import IndexOutOfRange, ShapeMismatch
from .geometry import (
    CameraModel,
    OccupancyMask,
    VoxelGridSpec,
    build_occupancy_mask,
    frustum_voxel_index,
    project_to_pixel,
)
from .nn import ParamBuilder, conv, linear, norm
from .tensor import Tensor, trilinear_sample

__all__ = [
    "QuerySet", "init_view_params", "context_net", "lift_outer_product", "voxel_pool", "splat",
    "positional_encoding", "select_proposals", "trilinear_sample", "deformable_cross_attention_3d", "merge_queries",
    "deformable_self_attention", "run_cgvt",
]


@dataclass
class QuerySet:
    indices: np.ndarray           # (n, 3) voxel indices, lexicographic
    flat: np.ndarray              # (n,) row-major flat voxel index
    features: Tensor              # (n, C)
    reference_points: np.ndarray  # (n, 3) continuous (u, v, b)

    def __len__(self):
        return len(self.indices)


def init_attention_layer(pb: ParamBuilder, name, channels, n_points):
    # zero offset predictor: the first pass samples exactly at the reference points
    pb.linear(f"{name}.offset", channels, 3 * n_points, zero=True)
    pb.linear(f"{name}.weight", channels, n_points)
    pb.linear(f"{name}.value", channels, channels, bias=False)
    pb.linear(f"{name}.out", channels, channels)
    pb.layer_norm(f"{name}.norm", channels)


def init_view_params(pb: ParamBuilder, c_img, channels, n_points=8, n_cross=3, n_self=2, prefix="vt"):
    pb.conv(f"{prefix}.context.0", (3, 3), c_img, channels)
    pb.conv(f"{prefix}.context.1", (3, 3), channels, channels)
    for i in range(n_cross):
        init_attention_layer(pb, f"{prefix}.cross.{i}", channels, n_points)
    for i in range(n_self):
        init_attention_layer(pb, f"{prefix}.self.{i}", channels, n_points)


def context_net(image_features, params, prefix="vt"):
    h = conv(image_features, params, f"{prefix}.context.0").relu()
    return conv(h, params, f"{prefix}.context.1")


def lift_outer_product(context, prob):
    """``F[v, u, d, c] = context[v, u, c] * prob[v, u, d]``."""
    context = T.as_tensor(context)
    prob = T.as_tensor(prob)
    if context.shape[:2] != prob.shape[:2]:
        raise ShapeMismatch(f"context {context.shape} and depth probability {prob.shape} disagree")
    H, W, C = context.shape
    D = prob.shape[-1]
    return context.reshape(H, W, 1, C) * prob.reshape(H, W, D, 1)


def splat(values, targets, size, keys=None):
    """Scatter-sum rows of ``values`` into ``size`` rows.

    With ``keys`` the contributions are first put in stable key order, so
    any permutation of the input rows accumulates identically.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if keys is not None:
        order = np.argsort(np.asarray(keys), kind="stable")
        values = T.take(values, order)
        targets = targets[order]
    return T.scatter_sum(values, targets, size)


def voxel_pool(frustum, cam: CameraModel, grid: VoxelGridSpec, cell_index=None):
    """Sum every frustum cell's feature into the voxel its bin centre falls in.

    Cells are accumulated in array (row, column, bin) order; cells outside the
    grid are dropped and untouched voxels stay zero.
    """
    H, W, D, C = frustum.shape
    if (H, W) != cam.image_size or D != cam.depth_bins:
        raise ShapeMismatch(f"frustum {frustum.shape} does not match camera {cam.image_size}x{cam.depth_bins}")
    if cell_index is None:
        cell_index = frustum_voxel_index(cam, grid)
    cell_index = np.asarray(cell_index).reshape(-1)
    rows = np.flatnonzero(cell_index >= 0)
    values = T.take(frustum.reshape(H * W * D, C), rows)
    pooled = T.scatter_sum(values, cell_index[rows], grid.num_voxels)
    return pooled.reshape(*grid.dims, C)


def positional_encoding(dims, channels) -> np.ndarray:
    """Fixed sinusoidal code of the voxel index, ``(X, Y, Z, C)``.

    Channel ``c`` encodes axis ``c % 3`` at frequency level ``(c // 3) // 2``,
    alternating sine and cosine.
    """
    idx = voxel_index_points(dims).reshape(*dims, 3)
    out = np.zeros((*dims, channels))
    for c in range(channels):
        axis, k = c % 3, c // 3
        phase = idx[..., axis] * (np.pi * 2.0 ** (k // 2) / dims[axis])
        out[..., c] = np.sin(phase) if k % 2 == 0 else np.cos(phase)
    return out


def select_proposals(vq, mask: OccupancyMask, cam: CameraModel, grid: VoxelGridSpec) -> QuerySet:
    """Voxel queries at the set bits of ``mask`` with their projected reference points."""
    if tuple(mask.dims) != tuple(grid.dims) or tuple(vq.shape[:3]) != tuple(grid.dims):
        raise ShapeMismatch(f"mask {mask.dims} / queries {vq.shape} / grid {grid.dims} disagree")
    C = vq.shape[-1]
    idx = mask.indices()
    flat = grid.flat_index(idx)
    feats = T.take(vq.reshape(grid.num_voxels, C), flat)
    ref = project_to_pixel(grid.index_to_center(idx), cam) if len(idx) else np.zeros((0, 3))
    return QuerySet(idx, flat, feats, ref)


def _deformable_attention(queries, volume, ref_lattice, params, name, n_points, block=True, return_weights=False):
    M, C = queries.shape
    offsets = linear(queries, params, f"{name}.offset").reshape(M, n_points, 3)
    weights = T.softmax(linear(queries, params, f"{name}.weight"), axis=-1)
    points = offsets + np.asarray(ref_lattice, dtype=queries.dtype).reshape(M, 1, 3)
    sampled = trilinear_sample(volume, points)
    values = T.matmul(sampled, params[f"{name}.value.w"])
    agg = (values * weights.reshape(M, n_points, 1)).sum(axis=1)
    out = linear(agg, params, f"{name}.out")
    if block:
        out = norm(queries + out, params, f"{name}.norm")
    return (out, weights) if return_weights else out


def deformable_cross_attention_3d(queries, frustum, reference_points, params, name, n_points=8, block=True,
                                  return_weights=False):
    """Queries ``(M, C)`` sample the ``(H, W, D, C)`` frustum around ``(u, v, b)`` references.

    Offsets are in pixel/pixel/bin units.  ``block`` adds the residual
    connection and layer normalisation.
    """
    ref = np.asarray(reference_points, dtype=np.float64).reshape(-1, 3)[:, [1, 0, 2]]
    return _deformable_attention(queries, frustum, ref, params, name, n_points, block, return_weights)


def merge_queries(updated, vq, mask: OccupancyMask, indices=None):
    """Write updated proposal features back into the full query volume."""
    X, Y, Z, C = vq.shape
    idx = mask.indices() if indices is None else np.asarray(indices)
    if len(idx) and (idx.min() < 0 or np.any(idx.max(axis=0) >= (X, Y, Z))):
        raise IndexOutOfRange("query index outside the volume")
    if len(idx) == 0:
        return vq
    flat = (idx[:, 0] * Y + idx[:, 1]) * Z + idx[:, 2]
    return T.index_put(vq.reshape(X * Y * Z, C), updated, flat).reshape(X, Y, Z, C)


def voxel_index_points(dims) -> np.ndarray:
    return np.argwhere(np.ones(dims, dtype=bool)).astype(np.float64)


def deformable_self_attention(volume, params, name, n_points=8, block=True, return_weights=False):
    """Every voxel samples the volume itself at offsets in voxel-index units."""
    X, Y, Z, C = volume.shape
    q = volume.reshape(X * Y * Z, C)
    out = _deformable_attention(q, volume, voxel_index_points((X, Y, Z)), params, name, n_points, block,
                                return_weights)
    if return_weights:
        return out[0].reshape(X, Y, Z, C), out[1]
    return out.reshape(X, Y, Z, C)


def run_cgvt(context, prob, depth_map, cam, grid, params, n_points=8, n_cross=3, n_self=2, prefix="vt",
             mask=None, mask_stride=1, cell_index=None, pos_scale=0.0, trace=None):
    """Lift, pool, select proposals, cross-attend, merge, then self-attend.

    ``pos_scale`` adds that multiple of a fixed positional code to the
    pooled queries.  ``trace`` (a dict) receives intermediate results.
    """
    frustum = lift_outer_product(context, prob)
    vq = voxel_pool(frustum, cam, grid, cell_index)
    if pos_scale:
        vq = vq + (pos_scale * positional_encoding(grid.dims, vq.shape[-1])).astype(vq.dtype)
    if mask is None:
        mask = build_occupancy_mask(depth_map, cam, grid, stride=mask_stride)
    qs = select_proposals(vq, mask, cam, grid)
    volume = vq
    if len(qs):
        q = qs.features
        for i in range(n_cross):
            q = deformable_cross_attention_3d(q, frustum, qs.reference_points, params, f"{prefix}.cross.{i}", n_points)
        volume = merge_queries(q, vq, mask, qs.indices)
    for i in range(n_self):
        volume = deformable_self_attention(volume, params, f"{prefix}.self.{i}", n_points)
    if trace is not None:
        trace.update(frustum=frustum, vq=vq, mask=mask, queries=qs, volume=volume)
    return volume
