"""Command line: ``synth``, ``forward``, ``train``, ``gradcheck``, ``eval``.

A scene directory holds ``grid.vxg``, ``depth_gt.dpm``, ``depth_stereo.dpm``,
``features.npy`` and the ``config.txt`` it was generated with.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import io
from .config import PipelineConfig, load_config, validate
from .errors import ConfigError, SSCError
from .gradsuite import run_suite
from .metrics import evaluate_iou_miou
from .model import SSCModel, train
from .synth import SceneSample, SemanticVoxelGrid, generate_scene
from .tensor import no_grad

SCENE_FILES = ("grid.vxg", "depth_gt.dpm", "depth_stereo.dpm", "features.npy", "config.txt")


def resolve_config(path=None, seed=None, scene_dir=None) -> PipelineConfig:
    """Explicit file, else the scene's own config echo, else defaults; ``seed`` overrides."""
    if path is not None:
        cfg = load_config(path)
    elif scene_dir is not None and (Path(scene_dir) / "config.txt").exists():
        cfg = load_config(Path(scene_dir) / "config.txt")
    else:
        cfg = PipelineConfig()
    if seed is not None:
        cfg = cfg.replace(seed=int(seed))
    return validate(cfg)


def make_scene(cfg: PipelineConfig) -> SceneSample:
    s = cfg.scene
    return generate_scene(cfg.seed, cfg.grid_spec(), s.num_classes, cfg.camera_model(), s.n_boxes, s.stereo_sigma,
                          cfg.model.image_channels, s.feature_noise)


def save_scene(scene: SceneSample, cfg: PipelineConfig, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    io.write_vxg(out / "grid.vxg", scene.grid.labels, scene.grid.num_classes)
    io.write_dpm(out / "depth_gt.dpm", scene.depth_gt)
    io.write_dpm(out / "depth_stereo.dpm", scene.depth_stereo)
    io.write_features(out / "features.npy", scene.image_features)
    (out / "config.txt").write_text(cfg.to_text())


def load_scene(scene_dir, cfg: PipelineConfig) -> SceneSample:
    d = Path(scene_dir)
    missing = [f for f in SCENE_FILES[:4] if not (d / f).exists()]
    if missing:
        raise FileNotFoundError(f"scene directory {d} lacks {', '.join(missing)}")
    labels, num_classes = io.read_vxg(d / "grid.vxg")
    if num_classes != cfg.scene.num_classes:
        raise ConfigError(f"scene has {num_classes} classes, config expects {cfg.scene.num_classes}")
    grid = SemanticVoxelGrid(cfg.grid_spec(), labels, num_classes)
    return SceneSample(grid, cfg.camera_model(), io.read_dpm(d / "depth_gt.dpm").astype(np.float64),
                       io.read_dpm(d / "depth_stereo.dpm").astype(np.float64), io.read_features(d / "features.npy"))


def metrics_line(iou, miou):
    return f"IoU={iou:.6f} mIoU={miou:.6f}"


def cmd_synth(cfg: PipelineConfig, out_dir):
    save_scene(make_scene(cfg), cfg, out_dir)
    print(f"wrote scene (seed {cfg.seed}) to {out_dir}")
    return 0


def cmd_forward(cfg: PipelineConfig, scene_dir, out_dir, checkpoint=None):
    scene = load_scene(scene_dir, cfg)
    model = SSCModel(cfg)
    if checkpoint is not None:
        model.load_arrays(io.read_checkpoint(checkpoint))
    with no_grad():
        pred = model.forward(scene).prediction()
    iou, miou, _ = evaluate_iou_miou(pred, scene.grid.labels, cfg.scene.num_classes)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    io.write_vxg(out / "pred.vxg", pred, cfg.scene.num_classes)
    line = metrics_line(iou, miou)
    (out / "metrics.txt").write_text(line + "\n")
    print(line)
    return 0


def cmd_train(cfg: PipelineConfig, scene_dirs, out_dir, log_every=10):
    scenes = [load_scene(d, cfg) for d in scene_dirs]
    if not scenes:
        raise ValueError("training needs at least one scene")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    model = SSCModel(cfg)
    rows = []
    log = open(out / "loss.csv", "w")
    log.write(",".join(io.LOSS_COLUMNS) + "\n")

    def on_step(step, parts):
        line = io.format_loss_row(step, parts.row())
        log.write(line + "\n")
        rows.append((step, parts.row()))
        if log_every and (step % log_every == 0 or step == cfg.train.steps - 1):
            print(line, flush=True)

    try:
        train(model, scenes, on_step=on_step)
    finally:
        log.close()
        # parameters are written even on an aborted run; the log says where it stopped
        io.write_checkpoint(out / "params", model.params)
    if rows:
        print(f"initial total={rows[0][1][0]:.6f} final total={rows[-1][1][0]:.6f}")
    return 0


def cmd_gradcheck(cfg: PipelineConfig, include_composite=True):
    results = run_suite(cfg.seed, include_composite, on_result=lambda r: print(r.line(), flush=True))
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed")
    return 1 if failed else 0


def cmd_eval(pred_path, gt_path):
    pred, k_pred = io.read_vxg(pred_path)
    gt, k_gt = io.read_vxg(gt_path)
    iou, miou, per_class = evaluate_iou_miou(pred, gt, max(k_pred, k_gt))
    print(metrics_line(iou, miou))
    for k, v in sorted(per_class.items()):
        print(f"class {k} IoU={v:.6f}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="sscdesk", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", type=Path, help="config file (section.key = value lines)")
        p.add_argument("--seed", type=int, help="override the config seed")
        if out:
            p.add_argument("--out", type=Path, required=True, help="output directory")

    common(sub.add_parser("synth", help="generate a synthetic scene"))
    p = sub.add_parser("forward", help="predict a scene and score it")
    common(p)
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, help="checkpoint prefix (without .manifest/.bin)")
    p = sub.add_parser("train", help="fit the model to one or more scenes")
    common(p)
    p.add_argument("--scene", type=Path, action="append", required=True)
    p.add_argument("--steps", type=int, help="override train.steps")
    common(sub.add_parser("gradcheck", help="finite-difference check of every op"), out=False)
    p = sub.add_parser("eval", help="IoU / mIoU of a predicted grid against ground truth")
    p.add_argument("pred", type=Path)
    p.add_argument("gt", type=Path)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "eval":
            return cmd_eval(args.pred, args.gt)
        scene_dir = getattr(args, "scene", None)
        if isinstance(scene_dir, list):
            scene_dir = scene_dir[0]
        cfg = resolve_config(args.config, args.seed, scene_dir)
        if args.command == "synth":
            return cmd_synth(cfg, args.out)
        if args.command == "forward":
            return cmd_forward(cfg, args.scene, args.out, args.checkpoint)
        if args.command == "train":
            if args.steps is not None:
                cfg = cfg.replace(**{"train.steps": args.steps})
            return cmd_train(cfg, args.scene, args.out)
        return cmd_gradcheck(cfg)
    except (SSCError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
