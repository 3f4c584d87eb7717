"""Run the architecture and update-mode studies on the synthetic data.

    python scripts/ablations.py --out runs/ablations --studies dc_depth,single_layer
"""

import argparse
import sys
from pathlib import Path

from plm import cli

HERE = Path(__file__).resolve().parent


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/ablations")
    p.add_argument("--config", default=str(HERE / "configs" / "desk_tiny.cfg"))
    p.add_argument("--studies", default=",".join(cli.STUDIES))
    p.add_argument("--sequences", default="6")
    p.add_argument("--full", action="store_true", help="decoder depths 1,3,9 (depth 9 fine-tunes slowly on a CPU)")
    args = p.parse_args(argv)
    out = Path(args.out)
    data = out / "data"
    if cli.main(["synth", "--out", str(data), "--sequences", args.sequences]):
        return 1
    common = ["--config", args.config, "--data", str(data), "--eval-data", str(data / "test")]
    pre = out / "shared_pretrain"
    for study in args.studies.split(","):
        extra = []
        if study == "dc_depth":
            extra = ["--values", "1,3,9" if args.full else "1,2,3"]
        if study == "update_mode":
            # one shared model; only the propagation differs
            if not (pre / "model.pt").exists() and cli.main(["pretrain", "--config", args.config, "--data", str(data), "--out", str(pre)]):
                return 1
            extra = ["--checkpoint", str(pre / "model.pt"), "--values", "none;5,50"]
        print(f"== {study}", flush=True)
        rc = cli.main(["ablate", "--study", study, *common, "--out", str(out / study), *extra])
        if rc:
            return rc
    return 0


if __name__ == "__main__":
    sys.exit(main())
