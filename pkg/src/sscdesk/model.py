"""End-to-end network: depth refinement, view transformation, local/global
encoding and the class head, plus the objective and a momentum-SGD loop."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .config import PipelineConfig
from .depth import init_depth_params, refine_depth
from .encoder import init_encoder_params, run_lge
from .errors import NonFiniteLoss, NonFinitePart, NonFiniteValue
from .geometry import frustum_voxel_index
from .losses import ClassWeighting, LossBreakdown, depth_loss, scal_loss, total_loss, weighted_cross_entropy
from .nn import ParamBuilder
from .rng import make_rng
from .synth import SceneSample
from .tensor import Tensor
from .view_transform import context_net, init_view_params, run_cgvt

PARAM_STREAM = 101


def init_params(cfg: PipelineConfig, dtype=None) -> dict[str, Tensor]:
    m = cfg.model
    pb = ParamBuilder(make_rng(cfg.seed, PARAM_STREAM), dtype=dtype or cfg.dtype)
    init_depth_params(pb, m.image_channels, m.depth_channels, cfg.camera.depth_bins)
    init_view_params(pb, m.image_channels, m.channels, m.n_points, m.n_cross, m.n_self)
    init_encoder_params(pb, m.channels, cfg.scene.num_classes, m.groups, m.n_blocks)
    return pb.params


@dataclass
class ForwardOutput:
    logits: Tensor       # (X, Y, Z, num_classes)
    depth_prob: Tensor   # (H, W, D_bins)

    def prediction(self) -> np.ndarray:
        return np.argmax(self.logits.data, axis=-1).astype(np.uint8)


class SSCModel:
    """Parameters plus the camera/grid geometry they run on."""

    def __init__(self, cfg: PipelineConfig, params: dict[str, Tensor] | None = None):
        self.cfg = cfg
        self.cam = cfg.camera_model()
        self.grid = cfg.grid_spec()
        self.cell_index = frustum_voxel_index(self.cam, self.grid)
        self.params = params if params is not None else init_params(cfg)

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        missing = set(self.params) ^ set(arrays)
        if missing:
            raise KeyError(f"checkpoint and model disagree on {sorted(missing)}")
        for name, t in self.params.items():
            if arrays[name].shape != t.shape:
                raise ValueError(f"{name}: checkpoint shape {arrays[name].shape} != {t.shape}")
            t.data = arrays[name].astype(t.dtype)

    def forward(self, scene: SceneSample, trace=None) -> ForwardOutput:
        cfg, m = self.cfg, self.cfg.model
        feats = Tensor(np.asarray(scene.image_features, dtype=cfg.dtype))
        prob = refine_depth(feats, scene.depth_stereo, self.params, window=m.window,
                            depth_scale=1.0 / cfg.camera.d_max)
        context = context_net(feats, self.params)
        volume = run_cgvt(context, prob, scene.depth_stereo, self.cam, self.grid, self.params, m.n_points,
                          m.n_cross, m.n_self, mask_stride=cfg.camera.mask_stride, cell_index=self.cell_index,
                          pos_scale=m.pos_scale, trace=trace)
        logits = run_lge(volume, self.params, m.groups, n_blocks=m.n_blocks, trace=trace)
        return ForwardOutput(logits, prob)

    def loss(self, out: ForwardOutput, scene: SceneSample, weighting: ClassWeighting) -> LossBreakdown:
        target = scene.grid.labels
        return total_loss(
            weighted_cross_entropy(out.logits, target, weighting),
            scal_loss(out.logits, target, "geo"),
            scal_loss(out.logits, target, "sem"),
            depth_loss(out.depth_prob, scene.depth_gt, self.cam),
            self.cfg.loss.lambda_depth,
        )


def class_weighting(cfg: PipelineConfig, scenes: Sequence[SceneSample]) -> ClassWeighting:
    K = cfg.scene.num_classes
    if cfg.loss.class_weights == "uniform":
        return ClassWeighting.uniform(K)
    return ClassWeighting.from_grids([s.grid.labels for s in scenes], K)


def train(model: SSCModel, scenes: Sequence[SceneSample], steps=None,
          on_step: Callable[[int, LossBreakdown], None] | None = None):
    """Gradient descent with momentum, cycling through ``scenes`` in order.

    ``on_step`` sees the loss at every step (before that step's update).
    Returns the list of ``(step, LossBreakdown)``.
    """
    cfg = model.cfg
    steps = cfg.train.steps if steps is None else steps
    weighting = class_weighting(cfg, scenes)
    velocity = {k: np.zeros_like(p.data) for k, p in model.params.items()}
    history = []
    for step in range(steps):
        scene = scenes[step % len(scenes)]
        try:
            parts = model.loss(model.forward(scene), scene, weighting)
            T.backward(parts.tensor)
        except (NonFinitePart, NonFiniteValue) as exc:
            raise NonFiniteLoss(step, f"non-finite loss at step {step}: {exc}") from exc
        parts = dataclasses.replace(parts, tensor=None)  # release the graph
        history.append((step, parts))
        if on_step is not None:
            on_step(step, parts)
        for k, p in model.params.items():
            g = p.grad if p.grad is not None else 0.0
            velocity[k] = cfg.train.momentum * velocity[k] + g
            p.data = (p.data - cfg.train.lr * velocity[k]).astype(p.dtype)
            p.grad = None
    return history
