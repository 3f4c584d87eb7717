"""Pretrain, segment and score the moving-square sequence end to end.

    python scripts/synthetic_demo.py --out runs/demo
"""

import argparse
import json
import sys
from pathlib import Path

from plm import cli

HERE = Path(__file__).resolve().parent


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/demo")
    p.add_argument("--config", default=str(HERE / "configs" / "desk_tiny.cfg"))
    p.add_argument("--seed", default="0")
    args = p.parse_args(argv)
    out = Path(args.out)
    data = out / "data"
    common = ["--config", args.config, "--seed", args.seed]
    seq = [
        "--sequence", str(data / "test" / "JPEGImages" / "square"),
        "--annotations", str(data / "test" / "Annotations" / "square"),
    ]
    steps = [
        ["synth", "--out", str(data)],
        ["pretrain", *common, "--data", str(data), "--out", str(out / "pretrain")],
        ["segment", *common, "--checkpoint", str(out / "pretrain" / "model.pt"), *seq, "--out", str(out / "PLM")],
        ["segment", *common, "--checkpoint", str(out / "pretrain" / "model.pt"), *seq, "--out", str(out / "PLM_P"), "--postprocess", "wm"],
        ["evaluate", "--pred", str(out / "PLM"), "--gt", str(data / "test" / "Annotations"), "--report", str(out / "eval_PLM")],
        ["evaluate", "--pred", str(out / "PLM_P"), "--gt", str(data / "test" / "Annotations"), "--report", str(out / "eval_PLM_P")],
    ]
    for step in steps:
        print("plm", " ".join(step), flush=True)
        rc = cli.main(step)
        if rc:
            return rc
    for name in ("PLM", "PLM_P"):
        agg = json.loads((out / f"eval_{name}.json").read_text())["aggregate"]
        print(f"{name:6s} mean IoU {agg['mean_iou']:.3f}  mean F {agg['mean_f']:.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
