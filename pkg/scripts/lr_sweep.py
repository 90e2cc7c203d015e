"""Overfit the default desk configuration on several scenes for a grid of
learning rates; prints loss ratio, peak loss and train mIoU per run.

    python scripts/lr_sweep.py --lr 0.01 0.005 --seeds 0 1 2 3 7
"""
import argparse
import time

import numpy as np

from sscdesk.cli import make_scene
from sscdesk.config import PipelineConfig
from sscdesk.errors import NonFiniteLoss
from sscdesk.metrics import evaluate_iou_miou
from sscdesk.model import SSCModel, train
from sscdesk.tensor import no_grad


def one_run(lr, momentum, seed, steps):
    cfg = PipelineConfig().replace(seed=seed, **{"train.lr": lr, "train.momentum": momentum, "train.steps": steps})
    model, scene = SSCModel(cfg), make_scene(cfg)
    totals = []
    start = time.perf_counter()
    try:
        train(model, [scene], on_step=lambda s, p: totals.append(p.total))
    except NonFiniteLoss as exc:
        return f"lr={lr} momentum={momentum} seed={seed} diverged at step {exc.step}"
    with no_grad():
        pred = model.forward(scene).prediction()
    iou, miou, _ = evaluate_iou_miou(pred, scene.grid.labels, cfg.scene.num_classes)
    return (f"lr={lr} momentum={momentum} seed={seed} ratio={totals[-1] / totals[0]:.4f} "
            f"peak={max(totals):.2f} IoU={iou:.3f} mIoU={miou:.3f} {time.perf_counter() - start:.0f}s")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--lr", type=float, nargs="+", default=[0.01, 0.005])
    ap.add_argument("--momentum", type=float, default=0.9)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 7])
    ap.add_argument("--steps", type=int, default=200)
    args = ap.parse_args()
    np.seterr(all="ignore")
    for lr in args.lr:
        for seed in args.seeds:
            print(one_run(lr, args.momentum, seed, args.steps), flush=True)
