"""Pinhole camera, depth bins, voxel grids and the depth-derived occupancy mask.

Pixel coordinates are integer at pixel centres: ``u`` indexes columns and
``v`` rows of an ``H x W`` image.  Depth means camera-frame ``z`` in meters.
All transforms are written out as explicit sums so that scalar and array
calls produce bit-identical results.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCamera, NonPositiveDepth, ShapeMismatch


def _affine(M, x, y, z):
    return (
        M[0, 0] * x + M[0, 1] * y + M[0, 2] * z + M[0, 3],
        M[1, 0] * x + M[1, 1] * y + M[1, 2] * z + M[1, 3],
        M[2, 0] * x + M[2, 1] * y + M[2, 2] * z + M[2, 3],
    )


@dataclass(frozen=True)
class CameraModel:
    K: np.ndarray
    E: np.ndarray
    image_size: tuple[int, int]
    depth_bins: int
    d_min: float
    d_max: float
    K_inv: np.ndarray = field(init=False, repr=False, compare=False)
    E_inv: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64)
        E = np.asarray(self.E, dtype=np.float64)
        if K.shape != (4, 4) or E.shape != (4, 4):
            raise ShapeMismatch("K and E must be 4x4")
        if not (K[0, 0] > 0 and K[1, 1] > 0):
            raise ValueError("focal lengths must be positive")
        if not self.d_min < self.d_max:
            raise ValueError("d_min must be below d_max")
        if self.depth_bins < 2:
            raise ValueError("need at least two depth bins")
        E_inv = np.linalg.inv(E)
        if not np.allclose(E @ E_inv, np.eye(4), atol=1e-9):
            raise ValueError("extrinsic matrix is not invertible")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "E", E)
        object.__setattr__(self, "K_inv", np.linalg.inv(K))
        object.__setattr__(self, "E_inv", E_inv)

    @property
    def height(self) -> int:
        return self.image_size[0]

    @property
    def width(self) -> int:
        return self.image_size[1]

    @classmethod
    def looking_along_x(cls, position, pitch_deg, image_size, fov_deg, depth_bins, d_min, d_max):
        """Camera at ``position`` looking down +x (world z up), pitched down by ``pitch_deg``."""
        H, W = image_size
        f = (W / 2.0) / np.tan(np.radians(fov_deg) / 2.0)
        K = np.array([[f, 0, (W - 1) / 2.0, 0], [0, f, (H - 1) / 2.0, 0], [0, 0, 1, 0], [0, 0, 0, 1]])
        p = np.radians(pitch_deg)
        forward = np.array([np.cos(p), 0.0, -np.sin(p)])
        right = np.array([0.0, -1.0, 0.0])
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        E = np.eye(4)
        E[:3, :3] = R
        E[:3, 3] = -R @ np.asarray(position, dtype=np.float64)
        return cls(K, E, (int(H), int(W)), int(depth_bins), float(d_min), float(d_max))

    def bin_depth(self, b):
        """Depth in meters of continuous bin coordinate ``b``."""
        return self.d_min + np.asarray(b, dtype=np.float64) * ((self.d_max - self.d_min) / (self.depth_bins - 1))

    def depth_to_bin(self, depth):
        return (np.asarray(depth, dtype=np.float64) - self.d_min) / (self.d_max - self.d_min) * (self.depth_bins - 1)

    def bin_centers(self) -> np.ndarray:
        return self.bin_depth(np.arange(self.depth_bins))


def back_project(u, v, z, cam: CameraModel):
    """Pixel ``(u, v)`` at camera depth ``z`` -> world point ``(x, y, z)``."""
    z = np.asarray(z, dtype=np.float64)
    if np.any(z <= 0):
        raise NonPositiveDepth("depth must be positive")
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    cx, cy, cz = _affine(cam.K_inv, u * z, v * z, z)
    return np.stack(np.broadcast_arrays(*_affine(cam.E_inv, cx, cy, cz)), axis=-1)


def project_to_pixel(p_world, cam: CameraModel):
    """World points ``(..., 3)`` -> continuous ``(u, v, b)`` pixel-depth coordinates.

    ``b`` is not clamped to the bin range.
    """
    p = np.asarray(p_world, dtype=np.float64)
    cx, cy, cz = _affine(cam.E, p[..., 0], p[..., 1], p[..., 2])
    if np.any(cz <= 0):
        raise BehindCamera("point is behind the camera")
    r0, r1, r2 = _affine(cam.K, cx, cy, cz)
    return np.stack([r0 / r2, r1 / r2, cam.depth_to_bin(cz)], axis=-1)


@dataclass(frozen=True)
class VoxelGridSpec:
    origin: tuple[float, float, float]
    voxel_size: float
    dims: tuple[int, int, int]

    def __post_init__(self):
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError("all grid dims must be >= 1")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def num_voxels(self) -> int:
        return int(np.prod(self.dims))

    def world_to_index(self, p):
        """Half-open voxel membership: floor((p - origin) / size)."""
        p = np.asarray(p, dtype=np.float64)
        return np.floor((p - np.asarray(self.origin)) / self.voxel_size).astype(np.int64)

    def index_to_center(self, idx):
        idx = np.asarray(idx, dtype=np.float64)
        return np.asarray(self.origin) + (idx + 0.5) * self.voxel_size

    def in_bounds(self, idx) -> np.ndarray:
        idx = np.asarray(idx)
        return np.all((idx >= 0) & (idx < np.asarray(self.dims)), axis=-1)

    def flat_index(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64)
        X, Y, Z = self.dims
        return (idx[..., 0] * Y + idx[..., 1]) * Z + idx[..., 2]

    def centers(self) -> np.ndarray:
        """All voxel centres, ``(X, Y, Z, 3)``."""
        grid = np.stack(np.meshgrid(*[np.arange(n) for n in self.dims], indexing="ij"), axis=-1)
        return self.index_to_center(grid)


@dataclass
class OccupancyMask:
    bits: np.ndarray

    @property
    def dims(self):
        return self.bits.shape

    @property
    def count(self) -> int:
        return int(self.bits.sum())

    def indices(self) -> np.ndarray:
        """Lexicographically sorted ``(n, 3)`` voxel indices of the set bits."""
        return np.argwhere(self.bits)


def pixel_grid(H: int, W: int, stride: int = 1):
    """``(v, u)`` integer pixel coordinates, row-major, optionally strided."""
    v, u = np.meshgrid(np.arange(0, H, stride), np.arange(0, W, stride), indexing="ij")
    return v, u


def build_occupancy_mask(depth_map, cam: CameraModel, grid: VoxelGridSpec, stride: int = 1) -> OccupancyMask:
    """Mark every voxel hit by at least one back-projected valid depth pixel.

    ``stride > 1`` uses a subsampled depth map.  Non-positive depths are
    missing and points outside the grid are dropped.
    """
    depth_map = np.asarray(depth_map, dtype=np.float64)
    if depth_map.shape != cam.image_size:
        raise ShapeMismatch(f"depth map {depth_map.shape} != image size {cam.image_size}")
    v, u = pixel_grid(*cam.image_size, stride)
    z = depth_map[v, u]
    valid = z > 0
    bits = np.zeros(grid.dims, dtype=bool)
    if valid.any():
        pts = back_project(u[valid], v[valid], z[valid], cam)
        idx = grid.world_to_index(pts)
        idx = idx[grid.in_bounds(idx)]
        bits[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    return OccupancyMask(bits)


def frustum_voxel_index(cam: CameraModel, grid: VoxelGridSpec) -> np.ndarray:
    """Flat voxel index of every frustum cell ``(v, u, d)``; -1 when outside the grid."""
    H, W = cam.image_size
    v, u, d = np.meshgrid(np.arange(H), np.arange(W), np.arange(cam.depth_bins), indexing="ij")
    pts = back_project(u, v, cam.bin_depth(d), cam)
    idx = grid.world_to_index(pts)
    ok = grid.in_bounds(idx)
    return np.where(ok, grid.flat_index(np.where(ok[..., None], idx, 0)), -1)
