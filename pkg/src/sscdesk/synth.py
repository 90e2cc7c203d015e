"""Seeded synthetic scenes: a ground slab plus labelled boxes, ray-marched depth,
noisy stand-in stereo depth and a class-coloured image-feature surrogate."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CameraModel, VoxelGridSpec, back_project, pixel_grid
from .rng import make_rng

FREE = 0
GROUND = 1
IGNORE = 255

# independent generator streams
_GRID, _STEREO, _FEAT_W, _FEAT_NOISE = range(4)


@dataclass
class SemanticVoxelGrid:
    spec: VoxelGridSpec
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.shape != self.spec.dims:
            raise ValueError(f"labels {self.labels.shape} do not match grid dims {self.spec.dims}")
        bad = (self.labels >= self.num_classes) & (self.labels != IGNORE)
        if bad.any():
            raise ValueError("label outside [0, num_classes) and not the ignore label")

    def occupied(self) -> np.ndarray:
        return (self.labels != FREE) & (self.labels != IGNORE)


@dataclass
class SceneSample:
    grid: SemanticVoxelGrid
    cam: CameraModel
    depth_gt: np.ndarray
    depth_stereo: np.ndarray
    image_features: np.ndarray


def random_boxes(rng, dims, num_classes, n_boxes):
    """Axis-aligned boxes standing on the ground slab, as ``(lo, hi, label)`` voxel ranges."""
    X, Y, Z = dims
    labels = list(range(2, num_classes)) or [GROUND]
    boxes = []
    for _ in range(n_boxes):
        sx = int(rng.integers(2, max(3, X // 4) + 1))
        sy = int(rng.integers(2, max(3, Y // 4) + 1))
        sz = int(rng.integers(1, max(2, Z - 1) + 1))
        x0 = int(rng.integers(X // 8, max(X // 8 + 1, X - sx + 1)))
        y0 = int(rng.integers(0, max(1, Y - sy + 1)))
        lo = np.array([x0, y0, min(1, Z - 1)])
        hi = np.minimum(lo + [sx, sy, sz], dims)
        boxes.append((lo, hi, int(rng.choice(labels))))
    return boxes


def make_grid(rng, spec: VoxelGridSpec, num_classes, n_boxes):
    labels = np.zeros(spec.dims, dtype=np.uint8)
    labels[:, :, 0] = GROUND
    for lo, hi, label in random_boxes(rng, spec.dims, num_classes, n_boxes):
        labels[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = label
    return SemanticVoxelGrid(spec, labels, num_classes)


def render_depth(grid: SemanticVoxelGrid, cam: CameraModel, return_labels=False):
    """March every pixel ray (step <= voxel_size / 4) to the first occupied voxel.

    Returns camera depth per pixel, 0 where nothing is hit before ``d_max``.
    """
    H, W = cam.image_size
    v, u = pixel_grid(H, W)
    u = u.reshape(-1).astype(np.float64)
    v = v.reshape(-1).astype(np.float64)
    # camera-frame ray direction has unit z; the step along the ray is dz * |dir|
    dx, dy, _ = (cam.K_inv[:3, :3] @ np.stack([u, v, np.ones_like(u)]))
    norm = np.sqrt(dx * dx + dy * dy + 1.0)
    dz = grid.spec.voxel_size / 4.0 / norm
    n_steps = int(np.ceil(cam.d_max / dz.min()))
    occ = grid.occupied()
    depth = np.zeros(H * W)
    label = np.zeros(H * W, dtype=np.uint8)
    alive = np.ones(H * W, dtype=bool)
    chunk = 64
    for start in range(1, n_steps + 1, chunk):
        k = np.arange(start, start + chunk, dtype=np.float64)
        z = dz[:, None] * k[None, :]
        ok = alive[:, None] & (z <= cam.d_max)
        if not ok.any():
            break
        pts = back_project(np.broadcast_to(u[:, None], z.shape), np.broadcast_to(v[:, None], z.shape), z, cam)
        idx = grid.spec.world_to_index(pts)
        inside = grid.spec.in_bounds(idx) & ok
        safe = np.where(inside[..., None], idx, 0)
        hit = inside & occ[safe[..., 0], safe[..., 1], safe[..., 2]]
        first = np.argmax(hit, axis=1)
        got = hit[np.arange(len(hit)), first]
        depth[got] = z[got, first[got]]
        sel = safe[got, first[got]]
        label[got] = grid.labels[sel[:, 0], sel[:, 1], sel[:, 2]]
        alive &= ~got
    depth = depth.reshape(H, W)
    return (depth, label.reshape(H, W)) if return_labels else depth


def stereo_depth(depth_gt, sigma, rng):
    """Ground-truth depth plus Gaussian noise on valid pixels; missing stays 0."""
    noise = rng.normal(0.0, sigma, size=depth_gt.shape)
    return np.where(depth_gt > 0, np.maximum(depth_gt + noise, 1e-3), 0.0)


def feature_surrogate(label_image, num_classes, channels, noise, rng_w, rng_n):
    """One-hot class image with seeded noise through a fixed random 3x3 conv."""
    H, W = label_image.shape
    onehot = np.eye(num_classes)[label_image.astype(np.int64)]
    onehot = onehot + rng_n.normal(0.0, noise, size=onehot.shape)
    kernel = rng_w.uniform(-1, 1, size=(3, 3, num_classes, channels)) / np.sqrt(9 * num_classes)
    padded = np.pad(onehot, [(1, 1), (1, 1), (0, 0)])
    out = np.zeros((H, W, channels))
    for i, j in np.ndindex(3, 3):
        out += padded[i:i + H, j:j + W] @ kernel[i, j]
    return out


def generate_scene(seed, spec: VoxelGridSpec, num_classes, cam: CameraModel, n_boxes=4, stereo_sigma=0.05,
                   feature_channels=8, feature_noise=0.1) -> SceneSample:
    if num_classes < 2:
        raise ValueError("need at least two classes (free + one semantic class)")
    grid = make_grid(make_rng(seed, _GRID), spec, num_classes, n_boxes)
    depth, labels = render_depth(grid, cam, return_labels=True)
    stereo = stereo_depth(depth, stereo_sigma, make_rng(seed, _STEREO))
    feats = feature_surrogate(labels, num_classes, feature_channels, feature_noise,
                              make_rng(seed, _FEAT_W), make_rng(seed, _FEAT_NOISE))
    return SceneSample(grid, cam, depth, stereo, feats)
