"""Finite-difference checks over every differentiable operation, at float64
on small seeded shapes.  Each check returns the max relative error."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .config import PipelineConfig
from .depth import fuse_depth, init_depth_params, neighborhood_cross_attention
from .encoder import TpvPlanes, dynamic_fuse, group_s2c_pool, upsample2x
from .gradcheck import check_gradients
from .losses import ClassWeighting, depth_loss, scal_loss, weighted_cross_entropy
from .model import SSCModel, class_weighting
from .nn import ParamBuilder
from .rng import make_rng
from .synth import generate_scene
from .tensor import Tensor
from .view_transform import (
    deformable_cross_attention_3d,
    deformable_self_attention,
    init_attention_layer,
    lift_outer_product,
    voxel_pool,
)

OP_TOLERANCE = 1e-4
COMPOSITE_TOLERANCE = 1e-3


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float
    seconds: float
    note: str = ""

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        line = f"{self.name:<26} max_rel_err={self.error:.3e} tol={self.tolerance:.0e} {status}"
        return f"{line} ({self.note})" if self.note else line


def _away_from_zero(rng, shape, lo=0.2):
    return rng.uniform(lo, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def small_config() -> PipelineConfig:
    """A 4x4 image over a 4x4x2 grid: the composite gradient-check configuration."""
    return PipelineConfig().replace(**{
        "precision": 64, "grid.dims": (4, 4, 2), "grid.voxel_size": 1.6, "grid.origin": (0.0, -3.2, 0.0),
        "camera.image": (4, 4), "camera.depth_bins": 6, "model.channels": 4, "model.depth_channels": 4,
        "model.image_channels": 3, "model.n_points": 2, "model.n_cross": 1, "model.n_self": 1,
        "model.window": 3, "model.n_blocks": 1, "scene.num_classes": 3, "scene.n_boxes": 2,
    })


def _attention_params(rng, C, N):
    pb = ParamBuilder(rng, np.float64)
    init_attention_layer(pb, "a", C, N)
    for k in ("a.offset.w", "a.offset.b"):
        pb.params[k].data = rng.normal(scale=0.4, size=pb.params[k].shape)
    return {k: v.data for k, v in pb.params.items()}


# -- individual checks ----------------------------------------------------------------
def _elementwise(kind):
    def run(rng):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4,))
        if kind == "div":
            b = _away_from_zero(rng, (4,), 0.5)
        w = rng.normal(size=(3, 4))
        return check_gradients(lambda x, y: (T.elementwise(kind, x, y) * w).sum(), [a, b])
    return run


def _unary(method, make):
    def run(rng):
        x = make(rng)
        w = rng.normal(size=x.shape)
        return check_gradients(lambda t: (getattr(t, method)() * w).sum(), [x])
    return run


def _max(rng):
    x = rng.permutation(24).reshape(2, 3, 4) * 0.1 + rng.uniform(0, 0.01, size=(2, 3, 4))
    w = rng.normal(size=(2, 4))
    return check_gradients(lambda t: (t.max(axis=1) * w).sum(), [x])


def _shape_ops(rng):
    w = rng.normal(size=(4, 6))
    return check_gradients(lambda t: (t.transpose(2, 0, 1).reshape(4, 6) * w).sum(), [rng.normal(size=(2, 3, 4))])


def _concat(rng):
    w = rng.normal(size=(2, 5))
    return check_gradients(lambda a, b: (T.concat([a, b], axis=1) * w).sum(),
                           [rng.normal(size=(2, 2)), rng.normal(size=(2, 3))])


def _take(rng):
    idx = np.array([2, 0, 2, 1])
    w = rng.normal(size=(4, 3))
    return check_gradients(lambda a: (T.take(a, idx) * w).sum(), [rng.normal(size=(3, 3))])


def _scatter_sum(rng):
    idx = np.array([1, 3, 1, 0, 3])
    w = rng.normal(size=(4, 2))
    return check_gradients(lambda v: (T.scatter_sum(v, idx, 4) * w).sum(), [rng.normal(size=(5, 2))])


def _index_put(rng):
    idx = np.array([3, 0])
    w = rng.normal(size=(5, 2))
    return check_gradients(lambda b, v: (T.index_put(b, v, idx) * w).sum(),
                           [rng.normal(size=(5, 2)), rng.normal(size=(2, 2))])


def _matmul(rng):
    w = rng.normal(size=(2, 3, 5))
    return check_gradients(lambda a, b: (T.matmul(a, b) * w).sum(),
                           [rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))])


def _conv(kernel, spatial, stride):
    def run(rng):
        x = rng.normal(size=spatial + (2,))
        k = rng.normal(size=kernel + (2, 3))
        b = rng.normal(size=(3,))
        out_shape = T.conv_nd(Tensor(x), Tensor(k), stride=stride, pad=kernel[0] // 2, bias=Tensor(b)).shape
        w = rng.normal(size=out_shape)
        return check_gradients(lambda x_, k_, b_: (T.conv_nd(x_, k_, stride=stride, pad=kernel[0] // 2, bias=b_)
                                                   * w).sum(), [x, k, b])
    return run


def _softmax(log):
    def run(rng):
        w = rng.normal(size=(3, 5))
        fn = T.log_softmax if log else T.softmax
        return check_gradients(lambda a: (fn(a, axis=-1) * w).sum(), [rng.normal(scale=2.0, size=(3, 5))])
    return run


def _layer_norm(rng):
    w = rng.normal(size=(3, 6))
    return check_gradients(lambda x, g, b: (T.layer_norm(x, g, b) * w).sum(),
                           [rng.normal(size=(3, 6)), rng.normal(size=6), rng.normal(size=6)])


def _trilinear(rng):
    coords = rng.uniform(-0.9, 3.9, size=(7, 3))
    w = rng.normal(size=(7, 2))
    return check_gradients(lambda v, c: (T.trilinear_sample(v, c) * w).sum(),
                           [rng.normal(size=(3, 4, 3, 2)), coords])


def _lift(rng):
    w = rng.normal(size=(2, 3, 4, 5))
    return check_gradients(lambda c, p: (lift_outer_product(c, p) * w).sum(),
                           [rng.normal(size=(2, 3, 5)), rng.random((2, 3, 4))])


def _voxel_pool(rng):
    cfg = small_config()
    cam, grid = cfg.camera_model(), cfg.grid_spec()
    H, W = cam.image_size
    w = rng.normal(size=grid.dims + (2,))
    return check_gradients(lambda F: (voxel_pool(F, cam, grid) * w).sum(),
                           [rng.normal(size=(H, W, cam.depth_bins, 2))])


def _dca(rng):
    C, N, M = 3, 4, 5
    p = _attention_params(rng, C, N)
    ref = np.column_stack([rng.uniform(0.3, 2.7, M), rng.uniform(0.3, 2.7, M), rng.uniform(0.3, 3.7, M)])
    names = sorted(p)
    w = rng.normal(size=(M, C))

    def f(q, F, *ps):
        params = dict(zip(names, ps))
        return (deformable_cross_attention_3d(q, F, ref, params, "a", N) * w).sum()
    return check_gradients(f, [rng.normal(size=(M, C)), rng.normal(size=(4, 4, 5, C))] + [p[k] for k in names])


def _dsa(rng):
    C, N = 3, 2
    p = _attention_params(rng, C, N)
    names = sorted(p)
    w = rng.normal(size=(3, 2, 2, C))

    def f(v, *ps):
        return (deformable_self_attention(v, dict(zip(names, ps)), "a", N) * w).sum()
    return check_gradients(f, [rng.normal(size=(3, 2, 2, C))] + [p[k] for k in names])


def _neighborhood_attention(rng):
    C = 3
    pb = ParamBuilder(rng, np.float64)
    for proj in ("q", "k", "v"):
        pb.linear(f"n.{proj}", C, C, bias=False)
    names = list(pb.params)
    w = rng.normal(size=(4, 5, C))

    def f(q, kv, *ps):
        return (neighborhood_cross_attention(q, kv, 3, dict(zip(names, ps)), "n") * w).sum()
    return check_gradients(f, [rng.normal(size=(4, 5, C)), rng.normal(size=(4, 5, C))]
                           + [pb.params[k].data for k in names])


def _fuse_depth(rng):
    pb = ParamBuilder(rng, np.float64)
    init_depth_params(pb, 2, 3, 4)
    names = [k for k in pb.params if k.startswith("depth.fuse")]
    w = rng.normal(size=(3, 3, 4))

    def f(m, s, *ps):
        return (fuse_depth(m, s, dict(zip(names, ps))) * w).sum()
    return check_gradients(f, [rng.normal(size=(3, 3, 3)), rng.normal(size=(3, 3, 3))]
                           + [pb.params[k].data for k in names])


def _group_s2c_pool(rng):
    pb = ParamBuilder(rng, np.float64)
    pb.conv("s", (1, 1), 2 * 3, 3)
    w = rng.normal(size=(4, 2, 3))
    vol = rng.permutation(4 * 2 * 6 * 3).reshape(4, 2, 6, 3) * 0.05

    def f(v, k, b):
        return (group_s2c_pool(v, 2, 2, {"s.w": k, "s.b": b}, "s") * w).sum()
    return check_gradients(f, [vol, pb.params["s.w"].data, rng.normal(size=3)])


def _dynamic_fuse(rng):
    X, Y, Z, C = 3, 2, 4, 2
    pb = ParamBuilder(rng, np.float64)
    pb.conv("lge.fuse", (1, 1, 1), C, 4)
    w = rng.normal(size=(X, Y, Z, C))

    def f(v, xy, xz, yz, k, b):
        return (dynamic_fuse(v, TpvPlanes(xy, xz, yz), {"lge.fuse.w": k, "lge.fuse.b": b}) * w).sum()
    return check_gradients(f, [rng.normal(size=(X, Y, Z, C)), rng.normal(size=(X, Y, C)),
                               rng.normal(size=(X, Z, C)), rng.normal(size=(Y, Z, C)),
                               pb.params["lge.fuse.w"].data, rng.normal(size=4)])


def _upsample(rng):
    w = rng.normal(size=(4, 6, 2, 2))
    return check_gradients(lambda x: (upsample2x(x) * w).sum(), [rng.normal(size=(2, 3, 1, 2))])


def _labels(rng, shape, K):
    t = rng.integers(0, K, size=shape)
    t.flat[: K] = np.arange(K)  # every class present
    t.flat[-1] = 255
    return t


def _weighted_ce(rng):
    t = _labels(rng, (3, 2, 2), 4)
    wt = ClassWeighting(rng.uniform(0.5, 3.0, size=4))
    return check_gradients(lambda x: weighted_cross_entropy(x, t, wt), [rng.normal(size=(3, 2, 2, 4))])


def _scal(mode):
    def run(rng):
        t = _labels(rng, (3, 2, 2), 4)
        return check_gradients(lambda x: scal_loss(x, t, mode), [rng.normal(size=(3, 2, 2, 4))])
    return run


def _depth_loss(rng):
    cam = small_config().camera_model()
    H, W = cam.image_size
    gt = rng.uniform(cam.d_min, cam.d_max, size=(H, W))
    gt[0, 0] = 0.0
    return check_gradients(lambda x: depth_loss(T.softmax(x, axis=-1), gt, cam),
                           [rng.normal(size=(H, W, cam.depth_bins))])


def composite_loss_error(seed=0, cfg: PipelineConfig | None = None):
    """Gradient of the full training objective with respect to every parameter."""
    cfg = cfg or small_config()
    rng = make_rng(seed, 7)
    model = SSCModel(cfg)
    scene = generate_scene(seed, model.grid, cfg.scene.num_classes, model.cam, cfg.scene.n_boxes,
                           cfg.scene.stereo_sigma, cfg.model.image_channels, cfg.scene.feature_noise)
    weighting = class_weighting(cfg, [scene])
    # move every parameter off its initial value (offsets especially) so no sample sits on a lattice point
    for p in model.params.values():
        p.data = p.data + rng.normal(scale=0.3, size=p.shape)
    names = list(model.params)

    def f(*ps):
        model.params = dict(zip(names, ps))
        out = model.forward(scene)
        return model.loss(out, scene, weighting).tensor

    return check_gradients(f, [model.params[k].data for k in names])


CHECKS: dict[str, Callable] = {
    "add": _elementwise("add"),
    "sub": _elementwise("sub"),
    "mul": _elementwise("mul"),
    "div": _elementwise("div"),
    "neg": _unary("__neg__", lambda r: r.normal(size=(3, 4))),
    "exp": _unary("exp", lambda r: r.normal(size=(3, 4))),
    "log": _unary("log", lambda r: r.uniform(0.5, 2.0, size=(3, 4))),
    "sqrt": _unary("sqrt", lambda r: r.uniform(0.5, 2.0, size=(3, 4))),
    "relu": _unary("relu", lambda r: _away_from_zero(r, (3, 4))),
    "sum": _unary("sum", lambda r: r.normal(size=(3, 4))),
    "max": _max,
    "reshape_transpose": _shape_ops,
    "concat": _concat,
    "take": _take,
    "scatter_sum": _scatter_sum,
    "index_put": _index_put,
    "matmul": _matmul,
    "conv2d": _conv((3, 3), (4, 5), 1),
    "conv2d_stride2": _conv((3, 3), (5, 4), 2),
    "conv3d": _conv((3, 3, 3), (3, 4, 2), 1),
    "softmax": _softmax(False),
    "log_softmax": _softmax(True),
    "layer_norm": _layer_norm,
    "trilinear_sample": _trilinear,
    "lift_outer_product": _lift,
    "voxel_pool": _voxel_pool,
    "deformable_cross_attn_3d": _dca,
    "deformable_self_attn": _dsa,
    "neighborhood_attention": _neighborhood_attention,
    "fuse_depth": _fuse_depth,
    "group_s2c_pool": _group_s2c_pool,
    "dynamic_fuse": _dynamic_fuse,
    "upsample2x": _upsample,
    "weighted_cross_entropy": _weighted_ce,
    "scal_geo": _scal("geo"),
    "scal_sem": _scal("sem"),
    "depth_loss": _depth_loss,
}


def run_suite(seed=0, include_composite=True, on_result=None) -> list[CheckResult]:
    results = []
    items = list(CHECKS.items())
    if include_composite:
        items.append(("composite_loss", lambda rng: composite_loss_error(seed)))
    for i, (name, fn) in enumerate(items):
        tol = COMPOSITE_TOLERANCE if name == "composite_loss" else OP_TOLERANCE
        start = time.perf_counter()
        try:
            err = float(fn(make_rng(seed, 1000 + i)))
        except Exception as exc:  # a crashing check is a failed check
            err, note = float("inf"), f"{type(exc).__name__}: {exc}"
        else:
            note = ""
        res = CheckResult(name, err, tol, time.perf_counter() - start, note)
        results.append(res)
        if on_result is not None:
            on_result(res)
    return results
