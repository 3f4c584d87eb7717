"""Segmentation metrics and run-level reports.

All masks are boolean foreground arrays of identical shape.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import ndimage

from .geometry import load_mask

log = logging.getLogger(__name__)

PROTOCOLS = ("davis", "jumpcut", "errorrate")


class EvaluationError(ValueError):
    pass


def _check(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise EvaluationError(f"mask size mismatch: {pred.shape} vs {gt.shape}")


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    _check(pred, gt)
    pred, gt = pred.astype(bool), gt.astype(bool)
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a 4-neighbour in the background. The frame edge
    does not count as background."""
    m = np.pad(mask.astype(bool), 1, mode="edge")
    core = m[1:-1, 1:-1]
    bg_nb = ~m[:-2, 1:-1] | ~m[2:, 1:-1] | ~m[1:-1, :-2] | ~m[1:-1, 2:]
    return core & bg_nb


def default_tolerance(shape) -> int:
    return int(math.ceil(0.008 * math.hypot(*shape[:2])))


def contour_f(pred: np.ndarray, gt: np.ndarray, tolerance: Optional[float] = None) -> float:
    _check(pred, gt)
    if tolerance is None:
        tolerance = default_tolerance(gt.shape)
    bp, bg = boundary(pred), boundary(gt)
    n_p, n_g = np.count_nonzero(bp), np.count_nonzero(bg)
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    # distance from every pixel to the nearest boundary pixel of the other mask
    d_to_g = ndimage.distance_transform_edt(~bg)
    d_to_p = ndimage.distance_transform_edt(~bp)
    precision = np.count_nonzero(d_to_g[bp] <= tolerance) / n_p
    recall = np.count_nonzero(d_to_p[bg] <= tolerance) / n_g
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def error_rate(pred: np.ndarray, gt: np.ndarray) -> float:
    """Percentage of misclassified pixels."""
    _check(pred, gt)
    pred, gt = pred.astype(bool), gt.astype(bool)
    wrong = np.count_nonzero(pred & ~gt) + np.count_nonzero(~pred & gt)
    return 100.0 * wrong / gt.size


def key_frames(n_frames: int, d: int = 16, last_key: int = 96) -> List[int]:
    """Key frames 0, d, 2d, ... <= last_key whose target frame i+d exists."""
    return [i for i in range(0, last_key + 1, d) if i + d < n_frames]


def transfer_error(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray]) -> float:
    """Mean over key frames of 100 * |pred xor gt| / |gt| at the transferred
    frame. Terms with an empty ground truth are skipped."""
    terms = []
    for k, (p, g) in enumerate(zip(preds, gts)):
        _check(p, g)
        p, g = p.astype(bool), g.astype(bool)
        n_fg = np.count_nonzero(g)
        if n_fg == 0:
            log.warning("key frame %d: empty ground truth, term skipped", k)
            continue
        terms.append(np.count_nonzero(p ^ g) / n_fg)
    if not terms:
        return float("nan")
    return 100.0 * sum(terms) / len(terms)


@dataclass
class SequenceScores:
    sequence: str
    iou: List[float]
    f: List[float]
    mean_iou: float
    mean_f: float
    std_iou: float
    std_f: float

    @property
    def n_frames(self) -> int:
        return len(self.iou)


def score_sequence(name: str, preds: Sequence[np.ndarray], gts: Sequence[np.ndarray], tolerance=None) -> SequenceScores:
    """DAVIS-style scores over frames 1..T-1 (frame 0 is given)."""
    ious = [iou(p, g) for p, g in zip(preds[1:], gts[1:])]
    fs = [contour_f(p, g, tolerance) for p, g in zip(preds[1:], gts[1:])]
    if not ious:
        ious, fs = [iou(preds[0], gts[0])], [contour_f(preds[0], gts[0], tolerance)]
    return SequenceScores(
        name,
        ious,
        fs,
        float(np.mean(ious)),
        float(np.mean(fs)),
        float(np.std(ious)),
        float(np.std(fs)),
    )


# -- directory-level evaluation ---------------------------------------------------


@dataclass
class Report:
    protocol: str
    rows: List[dict] = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    errors: List[str] = field(default_factory=list)
    incomplete: List[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return bool(self.rows) and not self.errors

    @property
    def columns(self) -> List[str]:
        if self.protocol == "davis":
            return ["sequence", "mean_iou", "mean_f", "std_iou", "std_f", "n_frames"]
        return ["sequence", "err"]

    def write(self, out_prefix) -> tuple:
        out_prefix = Path(out_prefix)
        out_prefix.parent.mkdir(parents=True, exist_ok=True)
        csv_path = out_prefix.with_suffix(".csv")
        json_path = out_prefix.with_suffix(".json")
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.columns, extrasaction="ignore")
            w.writeheader()
            for r in self.rows:
                w.writerow(r)
        json_path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True))
        return csv_path, json_path


def _mask_files(d: Path) -> Dict[str, Path]:
    return {p.stem: p for p in d.glob("*.png")}


def aggregate_rows(protocol: str, rows: List[dict]) -> dict:
    if not rows:
        return {}
    if protocol == "davis":
        keys = ["mean_iou", "mean_f", "std_iou", "std_f"]
        agg = {k: float(np.mean([r[k] for r in rows])) for k in keys}
        agg["n_sequences"] = len(rows)
        return agg
    vals = [r["err"] for r in rows if not math.isnan(r["err"])]
    return {"err": float(np.mean(vals)) if vals else float("nan"), "n_sequences": len(rows)}


def evaluate_run(pred_dir, gt_dir, protocol: str = "davis", d: int = 16, tolerance=None) -> Report:
    """Score ``<pred_dir>/<seq>/*.png`` against ``<gt_dir>/<seq>/*.png``.

    For ``jumpcut`` a sequence directory may hold ``key_NNNNN/`` subdirectories
    with one propagation per key frame; otherwise the single propagation's
    mask at frame i+d is used for key frame i."""
    if protocol not in PROTOCOLS:
        raise EvaluationError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    report = Report(protocol, config={"d": d, "tolerance": tolerance, "pred_dir": str(pred_dir), "gt_dir": str(gt_dir)})
    if not pred_dir.is_dir():
        report.errors.append(f"{pred_dir}: not a directory")
        return report
    seq_names = sorted(p.name for p in pred_dir.iterdir() if p.is_dir())
    for name in seq_names:
        gdir = gt_dir / name
        if not gdir.is_dir():
            report.errors.append(f"{name}: no ground truth directory")
            report.incomplete.append(name)
            continue
        gt_files = _mask_files(gdir)
        frames = sorted(gt_files)
        row = _score_dir(name, pred_dir / name, gt_files, frames, protocol, d, tolerance, report)
        if row is not None:
            report.rows.append(row)
    report.aggregate = aggregate_rows(protocol, report.rows)
    return report


def _load_pairs(name, pdir, gt_files, frames, report):
    pred_files = _mask_files(pdir)
    preds, gts, missing = [], [], False
    for f in frames:
        if f not in pred_files:
            report.errors.append(f"{name}/{f}.png: missing prediction")
            missing = True
            continue
        p, g = load_mask(pred_files[f]), load_mask(gt_files[f])
        if p.shape != g.shape:
            report.errors.append(f"{name}/{f}.png: size {p.shape} vs ground truth {g.shape}")
            missing = True
            continue
        preds.append(p)
        gts.append(g)
    if missing and name not in report.incomplete:
        report.incomplete.append(name)
    return preds, gts


def _score_dir(name, pdir, gt_files, frames, protocol, d, tolerance, report) -> Optional[dict]:
    if protocol == "jumpcut":
        preds, gts = [], []
        keys = key_frames(len(frames), d)
        for i in keys:
            target = frames[i + d]
            src = pdir / f"key_{i:05d}"
            src = src if src.is_dir() else pdir
            pf = src / f"{target}.png"
            if not pf.exists():
                report.errors.append(f"{name}/{pf.relative_to(pdir)}: missing prediction")
                if name not in report.incomplete:
                    report.incomplete.append(name)
                continue
            preds.append(load_mask(pf))
            gts.append(load_mask(gt_files[target]))
        if not preds:
            return None
        return {"sequence": name, "err": transfer_error(preds, gts), "key_frames": keys}
    preds, gts = _load_pairs(name, pdir, gt_files, frames, report)
    if not preds:
        return None
    if protocol == "errorrate":
        rates = [error_rate(p, g) for p, g in zip(preds, gts)]
        return {"sequence": name, "err": float(np.mean(rates)), "n_frames": len(rates)}
    s = score_sequence(name, preds, gts, tolerance)
    return {
        "sequence": name,
        "mean_iou": s.mean_iou,
        "mean_f": s.mean_f,
        "std_iou": s.std_iou,
        "std_f": s.std_f,
        "n_frames": s.n_frames,
    }
