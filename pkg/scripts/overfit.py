"""Fit one synthetic scene for N steps through the CLI commands and report
loss ratio and train-scene mIoU.

    python scripts/overfit.py --seed 7 --out runs/overfit
"""
import argparse
import re
import time
from contextlib import redirect_stdout
from io import StringIO
from pathlib import Path

from sscdesk import io
from sscdesk.cli import main


def run(seed, out, steps=None):
    out = Path(out)
    start = time.perf_counter()
    main(["synth", "--seed", str(seed), "--out", str(out / "scene")])
    train = ["train", "--scene", str(out / "scene"), "--out", str(out / "train")]
    if steps is not None:
        train += ["--steps", str(steps)]
    if main(train) != 0:
        raise SystemExit("training failed")
    main(["forward", "--scene", str(out / "scene"), "--checkpoint", str(out / "train" / "params"),
          "--out", str(out / "pred")])
    buf = StringIO()
    with redirect_stdout(buf):
        main(["eval", str(out / "pred" / "pred.vxg"), str(out / "scene" / "grid.vxg")])
    print(buf.getvalue(), end="")
    rows = io.read_loss_log(out / "train" / "loss.csv")
    ratio = rows[-1][1][0] / rows[0][1][0]
    miou = float(re.search(r"mIoU=([0-9.]+)", buf.getvalue()).group(1))
    print(f"seed={seed} steps={len(rows)} loss_ratio={ratio:.4f} mIoU={miou:.4f} "
          f"wall={time.perf_counter() - start:.0f}s")
    return ratio, miou


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--steps", type=int)
    ap.add_argument("--out", type=Path, default=Path("runs/overfit"))
    args = ap.parse_args()
    run(args.seed, args.out, args.steps)
