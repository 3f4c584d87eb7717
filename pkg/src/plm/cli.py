"""Command-line entry points: pretrain, finetune, segment, evaluate, ablate,
gradcheck (plus ``synth`` for writing the synthetic fixture dataset)."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import zlib
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import evaluation, synthetic
from .data import DEFAULT_MARGINS, NO_AUGMENT, Augment, DatasetError, Jitter, channel_mean, generate_finetune_pairs, generate_pretraining_pairs, scan_dataset, sequence_from_dir
from .geometry import GeometryError
from .network import PROFILES, ConfigError, init_network, load_checkpoint, parameter_hash, profile, save_checkpoint
from .propagation import FinetuneConfig, PropagationConfig, propagate_sequence, write_run
from .training import OptimizerConfig, TrainingAborted, TrainReport, finetune, gradient_check, pretrain, resume

log = logging.getLogger("plm")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
STUDIES = ("dc_depth", "single_layer", "update_mode", "compressor_ratio")


def substream(root_seed: int, name: str) -> int:
    """Independent child seed for a named consumer of randomness."""
    ss = np.random.SeedSequence([int(root_seed), zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass
class RunConfig:
    seed: int = 0
    arch: str = "tiny"
    decoder_depth: Optional[int] = None
    compression_ratio: Optional[int] = None
    single_layer: bool = False
    # optimisation
    lr: float = 1e-5
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 32
    epochs: int = 1
    lr_drop_every: int = 10
    lr_drop_factor: float = 0.1
    loss: str = "l1"
    # pretraining pairs
    refs_per_seq: int = 20
    targets_per_ref: int = 6
    margins: tuple = DEFAULT_MARGINS
    augment: bool = True
    max_pairs: Optional[int] = None
    # fine-tuning
    ft_lr: float = 2e-5
    ft_iterations: int = 500
    ft_pairs: int = 150
    # propagation
    threshold: float = 0.5
    postprocess: Optional[str] = None
    update_every: Optional[int] = None
    update_iterations: int = 50
    candidate_layout: str = "grid"
    # paths
    data_root: Optional[str] = None
    out: str = "runs"

    def arch_config(self):
        over = {"single_layer": self.single_layer}
        if self.decoder_depth is not None:
            over["decoder_depth"] = self.decoder_depth
        if self.compression_ratio is not None:
            over["compression_ratio"] = self.compression_ratio
        return profile(self.arch, **over)

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(self.lr, self.momentum, self.weight_decay, self.lr_drop_every, self.lr_drop_factor, self.batch_size, self.loss)

    def finetune_config(self) -> FinetuneConfig:
        opt = replace(self.optimizer(), learning_rate=self.ft_lr)
        return FinetuneConfig(opt=opt, iterations=self.ft_iterations, n_pairs=self.ft_pairs, margins=tuple(self.margins), seed=substream(self.seed, "finetune"))

    def propagation_config(self) -> PropagationConfig:
        return PropagationConfig(
            threshold=self.threshold,
            candidate_layout=self.candidate_layout,
            postprocess=self.postprocess,
            update_every=self.update_every,
            update_iterations=self.update_iterations,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["margins"] = list(self.margins)
        return d


# config-file key aliases
ALIASES = {"arch.profile": "arch", "learning_rate": "lr", "data": "data_root", "dataset": "data_root"}
_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(key: str, value):
    default = getattr(RunConfig, key, None) if key != "margins" else DEFAULT_MARGINS
    if not isinstance(value, str):
        return tuple(value) if key == "margins" else value
    v = value.strip()
    if key == "margins":
        return tuple(float(x) for x in v.split(",") if x)
    if v.lower() in ("none", "null", ""):
        return None
    if isinstance(default, bool) or key in ("single_layer", "augment"):
        if v.lower() in ("1", "true", "yes", "on"):
            return True
        if v.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    ftype = str(_FIELDS[key].type)
    try:
        if "int" in ftype:
            return int(v)
        if "float" in ftype:
            return float(v)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r}") from None
    return v


def read_config_file(path) -> dict:
    """JSON object or flat ``key = value`` lines (``#`` comments)."""
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        raw = json.loads(text)
    else:
        raw = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{n}: expected key = value")
            k, v = line.split("=", 1)
            raw[k.strip()] = v.strip()
    out = {}
    for k, v in raw.items():
        k = ALIASES.get(k, k).replace("-", "_")
        if k not in _FIELDS:
            raise ConfigError(f"{path}: unknown key {k!r}")
        out[k] = _coerce(k, v)
    return out


def resolve_config(args) -> RunConfig:
    """defaults < config file < command-line flags."""
    values = {}
    if os.environ.get("PLM_DATA_ROOT"):
        values["data_root"] = os.environ["PLM_DATA_ROOT"]
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for k in _FIELDS:
        v = getattr(args, k, None)
        if v is not None:
            values[k] = _coerce(k, v) if isinstance(v, str) else v
    cfg = RunConfig(**values)
    if cfg.arch not in PROFILES:
        raise ConfigError(f"unknown architecture profile {cfg.arch!r}")
    return cfg


def _write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=str))


# -- commands -----------------------------------------------------------------


def _pretraining_pairs(cfg: RunConfig, root) -> list:
    seqs = scan_dataset(root)
    if not seqs:
        raise DatasetError(f"{root}: no sequences under JPEGImages/")
    augment = Augment() if cfg.augment else NO_AUGMENT
    gen = generate_pretraining_pairs(
        seqs, cfg.refs_per_seq, cfg.targets_per_ref, tuple(cfg.margins), augment, rng_seed=substream(cfg.seed, "dataset"), jitter=Jitter(max_shift=0.1)
    )
    pairs = []
    for p in gen:
        if cfg.max_pairs is not None and len(pairs) >= cfg.max_pairs:
            break
        pairs.append(p)
    return pairs


def run_pretrain(cfg: RunConfig, out: Path, resume_from=None):
    if cfg.data_root is None:
        raise DatasetError("no dataset root (use --data or PLM_DATA_ROOT)")
    pairs = _pretraining_pairs(cfg, cfg.data_root)
    log.info("%d pretraining pairs", len(pairs))
    if resume_from:
        net, start, velocity = resume(resume_from)
    else:
        net, start, velocity = init_network(cfg.arch_config(), substream(cfg.seed, "init")), 0, None
        net.channel_mean.copy_(net.channel_mean.new_tensor(channel_mean(pairs)))
    report = pretrain(net, pairs, cfg.optimizer(), cfg.epochs, substream(cfg.seed, "shuffle"), out / "checkpoints", start, velocity)
    final = out / "model.pt"
    # the output path stays out of the checkpoint so reruns elsewhere are byte-identical
    settings = {k: v for k, v in cfg.to_dict().items() if k != "out"}
    save_checkpoint(net, final, {"epochs_completed": start + cfg.epochs, "run_config": settings})
    report.write_csv(out / "train_log.csv")
    return net, report, final, len(pairs)


def cmd_pretrain(args) -> int:
    cfg = resolve_config(args)
    out = Path(cfg.out)
    net, report, final, n_pairs = run_pretrain(cfg, out, args.resume)
    _write_json(
        out / "run.json",
        {"command": "pretrain", "run_config": cfg.to_dict(), "checkpoint": str(final), "n_pairs": n_pairs, "iterations": len(report.losses), "wall_clock": report.wall_clock, "parameter_hash": parameter_hash(net)},
    )
    print(f"checkpoint {final} ({len(report.losses)} iterations)")
    return EXIT_OK


def _load_sequence(args):
    frames = Path(args.sequence)
    return sequence_from_dir(frames, args.annotations, args.first_mask)


def cmd_finetune(args) -> int:
    cfg = resolve_config(args)
    out = Path(cfg.out)
    net, _ = load_checkpoint(args.checkpoint)
    seq = _load_sequence(args)
    mask = seq.mask(0)
    if not mask.any():
        raise DatasetError("no target object")
    ft = cfg.finetune_config()
    pairs = generate_finetune_pairs(seq.frame(0), mask, ft.margins, ft.n_pairs, rng_seed=[ft.seed, 0], max_shift=ft.max_shift, flips=ft.flips)
    report = TrainReport()
    tuned = finetune(net, pairs, ft.opt, ft.iterations, seed=ft.seed, report=report)
    path = out / "finetuned.pt"
    save_checkpoint(tuned, path, {"run_config": cfg.to_dict(), "source": str(args.checkpoint)})
    report.write_csv(out / "finetune_log.csv")
    _write_json(out / "finetune.json", {"command": "finetune", "run_config": cfg.to_dict(), "checkpoint": str(path), "iterations": len(report.losses)})
    print(f"checkpoint {path} ({len(report.losses)} iterations)")
    return EXIT_OK


def _variant(cfg: RunConfig) -> str:
    name = "PLM"
    if cfg.postprocess == "wm":
        name += "_P"
    if cfg.update_every is not None:
        name += "_U"
    return name


def run_segment(cfg: RunConfig, net, seq, out: Path) -> Path:
    run = propagate_sequence(seq, net, cfg.propagation_config(), cfg.finetune_config())
    extra = {"run_config": cfg.to_dict(), "variant": _variant(cfg)}
    if cfg.update_every is not None:
        extra["update"] = {"every": cfg.update_every, "iterations": cfg.update_iterations}
    return write_run(run, seq, out, extra)


def cmd_segment(args) -> int:
    cfg = resolve_config(args)
    net, _ = load_checkpoint(args.checkpoint)
    seq = _load_sequence(args)
    if not seq.mask(0).any():
        raise DatasetError("no target object")
    record = run_segment(cfg, net, seq, Path(cfg.out))
    print(f"{len(seq)} masks in {Path(cfg.out) / seq.name}, record {record}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    report = evaluation.evaluate_run(args.pred, args.gt, args.protocol, d=args.d, tolerance=args.tolerance)
    for e in report.errors:
        print(f"error: {e}", file=sys.stderr)
    prefix = Path(args.report) if args.report else Path(args.out or ".") / f"eval_{args.protocol}"
    report.write(prefix)
    print(json.dumps(report.aggregate, sort_keys=True))
    return EXIT_OK if report.ok else EXIT_FAIL


def _parse_update(value: str):
    if value.lower() in ("none", "off", "0"):
        return None
    try:
        k, iters = (int(x) for x in value.replace(":", ",").split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected k,iterations, got {value!r}") from None
    if k < 1 or iters < 0:
        raise argparse.ArgumentTypeError("update interval must be >= 1 and iterations >= 0")
    return k, iters


def ablation_variants(study: str, values: Optional[str]) -> List[tuple]:
    """(label, RunConfig overrides) for a study; raises ValueError on bad values."""
    if study == "dc_depth":
        vals = [int(v) for v in (values or "1,3,9").split(",")]
        if any(v < 1 for v in vals):
            raise ValueError("decoder depth must be >= 1")
        return [(f"dc_depth={v}", {"decoder_depth": v}) for v in vals]
    if study == "compressor_ratio":
        vals = [int(v) for v in (values or "4,8,16").split(",")]
        if any(v < 1 for v in vals):
            raise ValueError("compression ratio must be >= 1")
        return [(f"compressor_ratio={v}", {"compression_ratio": v}) for v in vals]
    if study == "single_layer":
        return [("PLM", {"single_layer": False}), ("PLM_S", {"single_layer": True})]
    if study == "update_mode":
        out = []
        for item in (values or "none;10,50").split(";"):
            upd = _parse_update(item.strip())
            if upd is None:
                out.append(("none", {"update_every": None}))
            else:
                out.append((f"update={upd[0]},{upd[1]}", {"update_every": upd[0], "update_iterations": upd[1]}))
        return out
    raise ValueError(f"unknown study {study!r}")


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    try:
        variants = ablation_variants(args.study, args.values)
        for _, over in variants:
            replace(cfg, **over).arch_config()
    except (ValueError, argparse.ArgumentTypeError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    if cfg.data_root is None:
        raise DatasetError("no dataset root (use --data or PLM_DATA_ROOT)")
    out = Path(cfg.out)
    eval_root = Path(args.eval_data or cfg.data_root)
    sequences = scan_dataset(eval_root)
    rows = []
    for label, over in variants:
        vcfg = replace(cfg, **over)
        vdir = out / label.replace("=", "_").replace(",", "_")
        if args.study == "update_mode" and args.checkpoint:
            net, _ = load_checkpoint(args.checkpoint)
        else:
            net, _, _, _ = run_pretrain(vcfg, vdir / "pretrain")
        for seq in sequences:
            run_segment(vcfg, net, seq, vdir / "masks")
        rep = evaluation.evaluate_run(vdir / "masks", eval_root / "Annotations", "davis")
        row = {"sequence": label, **rep.aggregate}
        row["n_frames"] = sum(r["n_frames"] for r in rep.rows)
        rows.append(row)
    table = evaluation.Report("davis", rows=rows, aggregate={}, config={"study": args.study, "run_config": cfg.to_dict()})
    csv_path, _ = table.write(out / f"ablation_{args.study}")
    for r in rows:
        print(f"{r['sequence']}: mean_iou={r.get('mean_iou', float('nan')):.4f} mean_f={r.get('mean_f', float('nan')):.4f}")
    print(f"table {csv_path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = resolve_config(args)
    mutate = {args.mutate: 2.0} if args.mutate else None
    res = gradient_check(cfg.arch_config(), seed=substream(cfg.seed, "init"), coords_per_group=args.coords, mutate=mutate)
    for g, e in res.per_group.items():
        print(f"{g:14s} max rel error {e:.3e} over {res.n_coords[g]} coords ({res.n_skipped[g]} kinks skipped)")
    print(f"max relative error {res.max_rel_error:.3e}")
    if args.out:
        _write_json(Path(args.out) / "gradcheck.json", {"run_config": cfg.to_dict(), "result": asdict(res)})
    return EXIT_OK if res.max_rel_error < args.tolerance else EXIT_FAIL


def cmd_synth(args) -> int:
    root = Path(args.out or "synthetic")
    names = synthetic.write_dataset(root, synthetic.training_scenes(args.sequences, args.frames), seed=args.seed or 0)
    frames, masks = synthetic.render_sequence(synthetic.SquareScene(n_frames=args.frames), seed=args.seed or 0)
    synthetic.write_sequence(root / "test", "square", frames, masks)
    print(f"{len(names)} training sequences in {root}, test sequence in {root / 'test'}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON or key = value file")
    p.add_argument("--seed", type=int)
    p.add_argument("--arch", choices=sorted(PROFILES))
    p.add_argument("--out")
    p.add_argument("--verbose", "-v", action="store_true")


def _training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--loss", choices=("l1", "l2sq"))
    p.add_argument("--decoder-depth", dest="decoder_depth", type=int)
    p.add_argument("--compression-ratio", dest="compression_ratio", type=int)
    p.add_argument("--single-layer", dest="single_layer", action="store_const", const=True)


def _finetune_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ft-lr", dest="ft_lr", type=float)
    p.add_argument("--ft-iterations", dest="ft_iterations", type=int)
    p.add_argument("--ft-pairs", dest="ft_pairs", type=int)


def _finetune_loss_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--loss", choices=("l1", "l2sq"))
    p.add_argument("--batch-size", dest="batch_size", type=int)


def _sequence_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sequence", required=True, help="directory of frames")
    p.add_argument("--first-mask", dest="first_mask", help="frame-0 mask (else taken from --annotations)")
    p.add_argument("--annotations", help="directory of masks named like the frames")


def _threshold(v: str) -> float:
    t = float(v)
    if not 0 < t < 1:
        raise argparse.ArgumentTypeError("threshold must lie in (0, 1)")
    return t


def _propagation_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--threshold", type=_threshold)
    p.add_argument("--postprocess", choices=("wm",))
    p.add_argument("--update", type=_parse_update, help="k,iterations: re-fine-tune every k frames")
    p.add_argument("--candidate-layout", dest="candidate_layout", choices=("grid", "margins"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plm", description="One-shot video object segmentation by Siamese matching")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="offline pretraining on a DAVIS-style dataset")
    _common(p)
    _training_flags(p)
    p.add_argument("--data", dest="data_root")
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-pairs", dest="max_pairs", type=int)
    p.add_argument("--no-augment", dest="augment", action="store_const", const=False)
    p.add_argument("--resume", help="continue from an epoch checkpoint")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="adapt a checkpoint to the first frame of a sequence")
    _common(p)
    _sequence_flags(p)
    _finetune_flags(p)
    _finetune_loss_flags(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("segment", help="fine-tune and propagate the first-frame mask")
    _common(p)
    _sequence_flags(p)
    _finetune_flags(p)
    _finetune_loss_flags(p)
    _propagation_flags(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("evaluate", help="score predicted masks against ground truth")
    _common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--protocol", choices=evaluation.PROTOCOLS, default="davis")
    p.add_argument("--d", type=int, default=16, help="transfer distance for jumpcut")
    p.add_argument("--tolerance", type=float, help="contour tolerance in pixels")
    p.add_argument("--report", help="output prefix for the CSV/JSON report")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="run an architecture or update-mode study")
    _common(p)
    _training_flags(p)
    _finetune_flags(p)
    p.add_argument("--study", required=True, choices=STUDIES)
    p.add_argument("--values", help="comma list; for update_mode use e.g. 'none;10,50'")
    p.add_argument("--data", dest="data_root", help="pretraining dataset root")
    p.add_argument("--eval-data", dest="eval_data", help="evaluation dataset root (default: --data)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-pairs", dest="max_pairs", type=int)
    p.add_argument("--checkpoint", help="pretrained model for the update_mode study")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of the analytic gradients")
    _common(p)
    p.add_argument("--coords", type=int, default=200)
    p.add_argument("--mutate", choices=("extractor", "compressors", "similarity_fc", "decoder"), help="scale one group's gradient by 2")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write the synthetic moving-object dataset")
    _common(p)
    p.add_argument("--sequences", type=int, default=6)
    p.add_argument("--frames", type=int, default=20)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "update", None) is not None:
        args.update_every, args.update_iterations = args.update
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, GeometryError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL
    except TrainingAborted as e:
        print(f"training aborted: {e} (batch: {e.meta})", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
