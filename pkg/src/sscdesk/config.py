"""Pipeline configuration: nested dataclasses, a ``section.key = value`` text
format with strict key checking, and validation that runs before any work."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli

from .errors import ConfigError
from .geometry import CameraModel, VoxelGridSpec


@dataclass
class GridConfig:
    dims: tuple[int, int, int] = (32, 32, 8)
    voxel_size: float = 0.2
    origin: tuple[float, float, float] = (0.0, -3.2, 0.0)


@dataclass
class CameraConfig:
    image: tuple[int, int] = (32, 32)
    position: tuple[float, float, float] = (-0.6, 0.0, 1.4)
    pitch_deg: float = 12.0
    fov_deg: float = 70.0
    depth_bins: int = 16
    d_min: float = 0.5
    d_max: float = 8.0
    mask_stride: int = 1


@dataclass
class ModelConfig:
    channels: int = 16
    depth_channels: int = 16
    image_channels: int = 8
    n_points: int = 8
    n_cross: int = 3
    n_self: int = 2
    groups: int = 2
    window: int = 5
    n_blocks: int = 2
    pos_scale: float = 0.5


@dataclass
class SceneConfig:
    num_classes: int = 5
    n_boxes: int = 4
    stereo_sigma: float = 0.05
    feature_noise: float = 0.1


@dataclass
class LossConfig:
    lambda_depth: float = 0.001
    class_weights: str = "frequency"


@dataclass
class TrainConfig:
    steps: int = 200
    lr: float = 0.005
    momentum: float = 0.9


@dataclass
class PipelineConfig:
    seed: int = 0
    precision: int = 32
    grid: GridConfig = field(default_factory=GridConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64

    def grid_spec(self) -> VoxelGridSpec:
        return VoxelGridSpec(self.grid.origin, self.grid.voxel_size, self.grid.dims)

    def camera_model(self) -> CameraModel:
        c = self.camera
        return CameraModel.looking_along_x(c.position, c.pitch_deg, c.image, c.fov_deg, c.depth_bins, c.d_min,
                                           c.d_max)

    def replace(self, **dotted):
        """Copy with ``section.key`` (or top-level) overrides, validated."""
        cfg = from_dict(to_dict(self))
        for key, value in dotted.items():
            _assign(cfg, key.replace("__", "."), value)
        validate(cfg)
        return cfg

    def to_text(self) -> str:
        lines = []
        for key, value in _flatten(to_dict(self)):
            lines.append(f"{key} = {_format(value)}")
        return "\n".join(lines) + "\n"


def to_dict(cfg):
    return dataclasses.asdict(cfg)


def _flatten(d, prefix=""):
    for k, v in d.items():
        if isinstance(v, dict):
            yield from _flatten(v, f"{prefix}{k}.")
        else:
            yield f"{prefix}{k}", v


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return f'"{value}"'
    if isinstance(value, (tuple, list)):
        return "[" + ", ".join(_format(v) for v in value) + "]"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(key, value, default):
    """Convert a parsed value to the type of the field's default."""
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or len(value) != len(default):
            raise ConfigError(f"{key} needs a list of {len(default)} values")
        return tuple(_coerce(key, v, d) for v, d in zip(value, default))
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
            raise ConfigError(f"{key} must be an integer")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float, np.integer, np.floating)):
            raise ConfigError(f"{key} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string")
        return value
    raise ConfigError(f"{key}: unsupported type")


def _assign(cfg, key, value):
    obj = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        sub = getattr(obj, p, None)
        if not dataclasses.is_dataclass(sub):
            raise ConfigError(f"unknown config section {p!r} in {key!r}")
        obj = sub
    names = {f.name for f in dataclasses.fields(obj)}
    leaf = parts[-1]
    if leaf not in names or dataclasses.is_dataclass(getattr(obj, leaf)):
        raise ConfigError(f"unknown config key {key!r}")
    setattr(obj, leaf, _coerce(key, value, getattr(obj, leaf)))


def from_dict(d) -> PipelineConfig:
    cfg = PipelineConfig()
    for key, value in _flatten(d):
        _assign(cfg, key, value)
    return cfg


def parse_config(text: str) -> PipelineConfig:
    """Parse ``section.key = value`` lines (TOML dotted keys); unknown keys are errors."""
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    cfg = from_dict(data)
    validate(cfg)
    return cfg


def load_config(path) -> PipelineConfig:
    return parse_config(Path(path).read_text())


def validate(cfg: PipelineConfig):
    def need(ok, msg):
        if not ok:
            raise ConfigError(msg)

    g, c, m, s, lo, t = cfg.grid, cfg.camera, cfg.model, cfg.scene, cfg.loss, cfg.train
    need(cfg.seed >= 0 and cfg.seed < 2 ** 64, "seed must be an unsigned 64-bit integer")
    need(cfg.precision in (32, 64), "precision must be 32 or 64")
    need(all(d > 0 for d in g.dims), "grid dims must be positive")
    need(g.voxel_size > 0, "voxel_size must be positive")
    need(all(np.isfinite(g.origin)), "grid origin must be finite")
    need(all(d > 0 for d in c.image), "image size must be positive")
    need(c.depth_bins >= 2, "need at least two depth bins")
    need(0 < c.d_min < c.d_max, "need 0 < d_min < d_max")
    need(0 < c.fov_deg < 180, "fov must lie in (0, 180)")
    need(c.mask_stride >= 1, "mask_stride must be positive")
    for name in ("channels", "depth_channels", "image_channels", "n_points", "groups", "window", "n_blocks"):
        need(getattr(m, name) > 0, f"model.{name} must be positive")
    need(m.n_cross >= 0 and m.n_self >= 0, "layer counts must be non-negative")
    need(m.window % 2 == 1, "window must be odd")
    need(all(d % m.groups == 0 for d in g.dims), "every grid axis must be divisible by model.groups")
    need(2 <= s.num_classes <= 255, "num_classes must lie in [2, 255]")
    need(s.n_boxes >= 0, "n_boxes must be non-negative")
    need(s.stereo_sigma >= 0 and s.feature_noise >= 0, "noise levels must be non-negative")
    need(lo.lambda_depth >= 0, "lambda_depth must be non-negative")
    need(lo.class_weights in ("frequency", "uniform"), "class_weights must be 'frequency' or 'uniform'")
    need(t.steps >= 0, "train.steps must be non-negative")
    need(t.lr > 0, "train.lr must be positive")
    need(0 <= t.momentum < 1, "train.momentum must lie in [0, 1)")
    return cfg
