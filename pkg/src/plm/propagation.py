"""Mask propagation through a video with candidate sampling.

Each new frame is probed with nine boxes around the previous target box; the
network responses are mapped back to frame coordinates, averaged where they
overlap and thresholded.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence as Seq

import numpy as np
from scipy import ndimage

from .data import DEFAULT_MARGINS, DatasetError, Sequence, generate_finetune_pairs, make_query_from
from .geometry import (
    PATCH_SIZE,
    Box,
    GeometryError,
    Patch,
    ScoreMap,
    crop_resize,
    expand_box,
    restore_map,
    save_mask,
    tight_box,
)
from .network import MatchingNetwork, forward_patches, parameter_hash
from .training import FINETUNE, OptimizerConfig, finetune

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PropagationConfig:
    candidate_margin: float = 30.0
    translation_step: float = 0.10
    threshold: float = 0.5
    # "grid": one margin x 3x3 translations; "margins": 3 margins x 3 diagonal shifts
    candidate_layout: str = "grid"
    candidate_margins: tuple = DEFAULT_MARGINS
    largest_component: bool = True
    postprocess: Optional[str] = None
    wm_size: int = 5
    wm_iterations: int = 3
    wm_sigma: float = 25.0 / 255.0
    update_every: Optional[int] = None
    update_iterations: int = 50

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        if self.update_every is not None and self.update_every < 1:
            raise ValueError("update interval must be >= 1")
        if self.postprocess not in (None, "wm"):
            raise ValueError(f"unknown postprocess {self.postprocess!r}")
        if self.candidate_layout not in ("grid", "margins"):
            raise ValueError(f"unknown candidate layout {self.candidate_layout!r}")


@dataclass(frozen=True)
class FinetuneConfig:
    """Settings for the first-frame adaptation (and PLM_U re-adaptation)."""

    opt: OptimizerConfig = FINETUNE
    iterations: int = 500
    n_pairs: int = 150
    margins: tuple = DEFAULT_MARGINS
    max_shift: float = 0.1
    flips: bool = True
    seed: int = 0


@dataclass
class FrameResult:
    mask: np.ndarray
    target_box: Box
    accumulated_map: np.ndarray
    coverage_count: np.ndarray
    candidates: List[Box] = field(default_factory=list)


def _shifted(b: Box, dx: int, dy: int, frame_w: int, frame_h: int) -> Box:
    try:
        return b.translate(dx, dy).clamp(frame_w, frame_h)
    except GeometryError:
        return b


def sample_candidates(prev_box: Box, cfg: PropagationConfig, frame_w: int, frame_h: int) -> List[Box]:
    """Nine deterministic probe boxes around ``prev_box``."""
    if cfg.candidate_layout == "margins":
        out = []
        for m in cfg.candidate_margins:
            base = expand_box(prev_box, m, frame_w, frame_h)
            sx = int(round(cfg.translation_step * base.w))
            sy = int(round(cfg.translation_step * base.h))
            out.extend(_shifted(base, k * sx, k * sy, frame_w, frame_h) for k in (-1, 0, 1))
        return out
    base = expand_box(prev_box, cfg.candidate_margin, frame_w, frame_h)
    sx = int(round(cfg.translation_step * base.w))
    sy = int(round(cfg.translation_step * base.h))
    return [_shifted(base, i * sx, j * sy, frame_w, frame_h) for j in (-1, 0, 1) for i in (-1, 0, 1)]


def accumulate(maps: Seq[ScoreMap], frame_w: int, frame_h: int):
    """Average foreground evidence (1 - clamped output) over covering maps.

    Returns ``(score, coverage)``; score is 0 where coverage is 0."""
    total = np.zeros((frame_h, frame_w))
    count = np.zeros((frame_h, frame_w), dtype=np.int32)
    for s in maps:
        fg = ScoreMap(1.0 - np.clip(s.values, 0.0, 1.0), s.source_box)
        values, valid = restore_map(fg, frame_w, frame_h)
        total += values
        count += valid
    score = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
    return score, count


def largest_component(mask: np.ndarray) -> np.ndarray:
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    if n <= 1:
        return mask
    sizes = ndimage.sum(mask, labels, index=np.arange(1, n + 1))
    return labels == (int(np.argmax(sizes)) + 1)


def segment_frame(
    net: MatchingNetwork,
    query: Patch,
    frame: np.ndarray,
    prev_box: Box,
    cfg: PropagationConfig = PropagationConfig(),
    frame_index: int = 0,
) -> FrameResult:
    if prev_box.w < 2 or prev_box.h < 2:
        raise GeometryError("previous box is degenerate")
    h, w = frame.shape[:2]
    boxes = sample_candidates(prev_box, cfg, w, h)
    patches = [crop_resize(frame, b, PATCH_SIZE, frame_index) for b in boxes]
    outputs = forward_patches(net, query, patches)
    maps = [ScoreMap(o, b) for o, b in zip(outputs, boxes)]
    score, count = accumulate(maps, w, h)
    mask = (score > cfg.threshold) & (count > 0)
    if cfg.largest_component:
        mask = largest_component(mask)
    box = tight_box(mask)
    if box is None or box.w < 2 or box.h < 2:
        box = prev_box
    return FrameResult(mask, box, score, count, boxes)


def weighted_median_refine(mask: np.ndarray, frame: np.ndarray, filter_size: int = 5, iterations: int = 3, sigma: float = 25.0 / 255.0) -> np.ndarray:
    """Binary weighted median with Gaussian colour-affinity weights.

    Each pixel takes the label holding the larger share of weight in its
    window; an exact tie keeps the current label."""
    r = filter_size // 2
    h, w = mask.shape
    img = np.pad(frame.astype(np.float64), ((r, r), (r, r), (0, 0)), mode="edge")
    inside = np.pad(np.ones((h, w)), r)
    centre = frame.astype(np.float64)
    weights = []
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            nb = img[r + dy : r + dy + h, r + dx : r + dx + w]
            d2 = ((nb - centre) ** 2).sum(axis=2)
            valid = inside[r + dy : r + dy + h, r + dx : r + dx + w]
            weights.append((dy, dx, np.exp(-d2 / (2 * sigma * sigma)) * valid))
    m = mask.astype(bool)
    for _ in range(iterations):
        padded = np.pad(m.astype(np.float64), r)
        fg = np.zeros((h, w))
        tot = np.zeros((h, w))
        for dy, dx, wt in weights:
            fg += wt * padded[r + dy : r + dy + h, r + dx : r + dx + w]
            tot += wt
        half = tot / 2.0
        m = np.where(np.isclose(fg, half, rtol=0, atol=1e-12), m, fg > half)
    return m


@dataclass
class PropagationRun:
    sequence: str
    results: List[FrameResult]
    masks: List[np.ndarray]
    timings: List[float]
    hash_before: str
    hash_after: str
    network: MatchingNetwork
    config: dict = field(default_factory=dict)

    def record(self) -> dict:
        return {
            "sequence": self.sequence,
            "config": self.config,
            "timings": self.timings,
            "boxes": [r.target_box.as_list() for r in self.results],
            "network_hash_before": self.hash_before,
            "network_hash_after": self.hash_after,
        }


def propagate_sequence(
    seq: Sequence,
    pretrained: MatchingNetwork,
    cfg: PropagationConfig = PropagationConfig(),
    ft: FinetuneConfig = FinetuneConfig(),
    start: int = 0,
    stop: Optional[int] = None,
) -> PropagationRun:
    """Fine-tune on frame ``start`` and propagate its mask up to ``stop``."""
    if seq.annotations[start] is None:
        raise DatasetError(f"{seq.name}: frame {start} has no annotation")
    stop = len(seq) if stop is None else min(stop, len(seq))
    first, first_mask = seq.frame(start), seq.mask(start)
    if tight_box(first_mask) is None:
        raise DatasetError("no target object")

    t0 = time.perf_counter()
    net = _adapt(pretrained, first, first_mask, ft, ft.iterations, start)
    query = make_query_from(first, first_mask, start)
    h, w = first_mask.shape
    gt = FrameResult(first_mask, tight_box(first_mask), np.where(first_mask, 1.0, 0.0), np.ones((h, w), dtype=np.int32))
    results, timings = [gt], [time.perf_counter() - t0]
    masks = [first_mask]
    hash_before = parameter_hash(net)

    box = gt.target_box
    for t in range(start + 1, stop):
        t0 = time.perf_counter()
        frame = seq.frame(t)
        if cfg.update_every is not None:
            prev_frame, prev_mask = seq.frame(t - 1), results[-1].mask
            if prev_mask.any():
                query = make_query_from(prev_frame, prev_mask, t - 1)
                if (t - start) % cfg.update_every == 0:
                    net = _adapt(net, prev_frame, prev_mask, ft, cfg.update_iterations, t - 1)
        res = segment_frame(net, query, frame, box, cfg, t)
        box = res.target_box
        results.append(res)
        mask = res.mask
        if cfg.postprocess == "wm":
            mask = weighted_median_refine(mask, frame, cfg.wm_size, cfg.wm_iterations, cfg.wm_sigma)
        masks.append(mask)
        timings.append(time.perf_counter() - t0)

    return PropagationRun(
        sequence=seq.name,
        results=results,
        masks=masks,
        timings=timings,
        hash_before=hash_before,
        hash_after=parameter_hash(net),
        network=net,
        config={"propagation": _jsonable(asdict(cfg)), "finetune": _jsonable(asdict(ft)), "start": start, "stop": stop},
    )


def _adapt(net, frame, mask, ft: FinetuneConfig, iterations: int, frame_index: int) -> MatchingNetwork:
    pairs = generate_finetune_pairs(
        frame, mask, ft.margins, ft.n_pairs, rng_seed=[ft.seed, frame_index], max_shift=ft.max_shift, flips=ft.flips, frame_index=frame_index
    )
    return finetune(net, pairs, ft.opt, iterations, seed=ft.seed + frame_index)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def write_run(run: PropagationRun, seq: Sequence, out_dir, extra_record: Optional[dict] = None) -> Path:
    """Write ``<out>/<sequence>/NNNNN.png`` masks and ``<out>/<sequence>.json``."""
    out_dir = Path(out_dir)
    start = run.config.get("start", 0)
    for k, mask in enumerate(run.masks):
        save_mask(out_dir / run.sequence / f"{seq.frames[start + k].stem}.png", mask)
    record = run.record()
    if extra_record:
        record.update(extra_record)
    path = out_dir / f"{run.sequence}.json"
    path.write_text(json.dumps(record, indent=2, sort_keys=True))
    return path
