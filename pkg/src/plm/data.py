"""DAVIS-style sequence loading and query/search pair synthesis."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence as Seq

import numpy as np
from scipy import ndimage

from .geometry import (
    LABEL_SIZE,
    PATCH_SIZE,
    Box,
    GeometryError,
    Patch,
    crop_resize,
    downsample_label,
    expand_box,
    load_image,
    load_mask,
    overlap_ratio,
    resize_mask,
    tight_box,
)

log = logging.getLogger(__name__)

FRAME_SUFFIXES = (".jpg", ".jpeg", ".png")
QUERY_MARGIN = 25.0
DEFAULT_MARGINS = (10.0, 30.0, 50.0)
MIN_OVERLAP = 0.5
MIN_FRAME_GAP = 5


class DatasetError(ValueError):
    pass


@dataclass
class Sequence:
    name: str
    frames: List[Path]
    annotations: List[Optional[Path]]
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.frames)

    def frame(self, i: int) -> np.ndarray:
        key = ("f", i)
        if key not in self._cache:
            self._cache[key] = load_image(self.frames[i])
        return self._cache[key]

    def mask(self, i: int) -> np.ndarray:
        if self.annotations[i] is None:
            raise DatasetError(f"{self.name}: no annotation for frame {i}")
        key = ("m", i)
        if key not in self._cache:
            self._cache[key] = load_mask(self.annotations[i])
        return self._cache[key]

    def annotated(self) -> List[int]:
        return [i for i, a in enumerate(self.annotations) if a is not None]


def _list_frames(d: Path) -> List[Path]:
    return sorted(p for p in d.iterdir() if p.suffix.lower() in FRAME_SUFFIXES)


def _image_size(path: Path):
    from PIL import Image

    with Image.open(path) as im:
        return im.size


def sequence_from_dir(frame_dir, annotation_dir=None, first_mask=None, name=None) -> Sequence:
    """Build a Sequence from a frame directory plus either an annotation
    directory or a single first-frame mask."""
    frame_dir = Path(frame_dir)
    frames = _list_frames(frame_dir)
    if not frames:
        raise DatasetError(f"no frames in {frame_dir}")
    annotations: List[Optional[Path]] = [None] * len(frames)
    if annotation_dir is not None:
        by_stem = {p.stem: p for p in Path(annotation_dir).glob("*.png")}
        annotations = [by_stem.get(f.stem) for f in frames]
    if first_mask is not None:
        annotations[0] = Path(first_mask)
    seq = Sequence(name or frame_dir.name, frames, annotations)
    _validate(seq)
    return seq


def _validate(seq: Sequence) -> None:
    if seq.annotations[0] is None:
        raise DatasetError(f"{seq.name}: frame-0 annotation is mandatory")
    for f, a in zip(seq.frames, seq.annotations):
        if a is None:
            continue
        if _image_size(f) != _image_size(a):
            raise DatasetError(f"{a}: size {_image_size(a)} does not match frame {f.name} {_image_size(f)}")


def scan_dataset(root) -> List[Sequence]:
    """Enumerate ``JPEGImages/<seq>/`` and ``Annotations/<seq>/`` under root."""
    root = Path(root)
    img_root = root / "JPEGImages"
    ann_root = root / "Annotations"
    if not img_root.is_dir():
        return []
    seqs = []
    for d in sorted(p for p in img_root.iterdir() if p.is_dir()):
        ann = ann_root / d.name
        seqs.append(sequence_from_dir(d, ann if ann.is_dir() else None, name=d.name))
    return seqs


# -- query / search patches ---------------------------------------------------


def make_query_from(image: np.ndarray, mask: np.ndarray, frame_index: int = 0) -> Patch:
    """Segmented reference patch: 25% margin box, background zeroed."""
    box = tight_box(mask)
    if box is None:
        raise DatasetError("no target object")
    h, w = mask.shape
    box = expand_box(box, QUERY_MARGIN, w, h)
    if box.w < 2 or box.h < 2:
        box = Box(box.x, box.y, max(box.w, 2), max(box.h, 2)).clamp(w, h)
    patch = crop_resize(image, box, PATCH_SIZE, frame_index)
    pmask = resize_mask(mask[box.slices()], PATCH_SIZE, PATCH_SIZE)
    patch.pixels[~pmask] = 0.0
    patch.mask = pmask
    return patch


def make_query(seq: Sequence, frame_idx: int) -> Patch:
    return make_query_from(seq.frame(frame_idx), seq.mask(frame_idx), frame_idx)


@dataclass(frozen=True)
class Jitter:
    """Random translation of search crops.

    ``max_shift`` is a fraction of the (expanded) crop size; ``per_margin`` is
    how many crops are drawn for each margin.
    """

    max_shift: float = 0.0
    per_margin: int = 1
    max_tries: int = 20


NO_JITTER = Jitter()


def sample_search_boxes(
    target_box: Box,
    margins: Seq[float],
    jitter: Jitter,
    rng_seed,
    frame_w: int,
    frame_h: int,
) -> List[Box]:
    rng = np.random.default_rng(rng_seed)
    boxes = []
    for margin in margins:
        base = expand_box(target_box, margin, frame_w, frame_h)
        for _ in range(jitter.per_margin):
            boxes.append(_jittered(base, target_box, jitter, rng, frame_w, frame_h))
    return boxes


def _jittered(base: Box, target: Box, jitter: Jitter, rng, frame_w, frame_h) -> Box:
    if jitter.max_shift <= 0:
        return base
    for _ in range(jitter.max_tries):
        dx, dy = rng.uniform(-jitter.max_shift, jitter.max_shift, size=2)
        try:
            b = base.translate(int(round(dx * base.w)), int(round(dy * base.h))).clamp(frame_w, frame_h)
        except GeometryError:
            continue
        if b.w >= 2 and b.h >= 2 and overlap_ratio(target, b) >= MIN_OVERLAP:
            return b
    return base


# -- pairs ----------------------------------------------------------------------


@dataclass
class PatchPair:
    query: Patch
    search: Patch
    label: np.ndarray
    meta: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Augment:
    flip: bool = True
    rotations: tuple = (-30.0, -15.0, 15.0, 30.0)

    @property
    def variants(self) -> int:
        return 1 + int(self.flip) + len(self.rotations)


NO_AUGMENT = Augment(flip=False, rotations=())


def flip_pair(pair: PatchPair) -> PatchPair:
    search = Patch(
        pixels=np.ascontiguousarray(pair.search.pixels[:, ::-1]),
        source_box=pair.search.source_box,
        source_frame_index=pair.search.source_frame_index,
        mask=None if pair.search.mask is None else np.ascontiguousarray(pair.search.mask[:, ::-1]),
    )
    meta = dict(pair.meta)
    meta["flip"] = not meta.get("flip", False)
    return PatchPair(pair.query, search, np.ascontiguousarray(pair.label[:, ::-1]), meta)


def rotate_pair(pair: PatchPair, angle: float) -> PatchPair:
    """Rotate the search patch and its label about their centres."""
    pixels = ndimage.rotate(pair.search.pixels, angle, axes=(1, 0), reshape=False, order=1, mode="nearest")
    label = ndimage.rotate(pair.label, angle, axes=(1, 0), reshape=False, order=0, mode="nearest")
    mask = None
    if pair.search.mask is not None:
        mask = ndimage.rotate(pair.search.mask.astype(np.uint8), angle, axes=(1, 0), reshape=False, order=0, mode="nearest") > 0
    search = Patch(pixels.astype(np.float32), pair.search.source_box, pair.search.source_frame_index, mask)
    meta = dict(pair.meta)
    meta["rotation"] = angle
    return PatchPair(pair.query, search, label.astype(np.float32), meta)


def augment_pair(pair: PatchPair, augment: Augment) -> List[PatchPair]:
    out = [pair]
    if augment.flip:
        out.append(flip_pair(pair))
    out.extend(rotate_pair(pair, a) for a in augment.rotations)
    return out


def make_search(image: np.ndarray, mask: np.ndarray, box: Box, frame_index: int) -> tuple:
    patch = crop_resize(image, box, PATCH_SIZE, frame_index)
    patch.mask = resize_mask(mask[box.slices()], PATCH_SIZE, PATCH_SIZE)
    return patch, downsample_label(mask, box, LABEL_SIZE)


def _pick(rng, candidates: Seq[int], k: int) -> List[int]:
    candidates = list(candidates)
    replace = len(candidates) < k
    return [int(i) for i in rng.choice(candidates, size=k, replace=replace)]


def pretraining_pair_count(n_sequences: int, refs_per_seq: int, targets_per_ref: int, n_margins: int, jitter: Jitter, augment: Augment) -> int:
    return n_sequences * refs_per_seq * targets_per_ref * n_margins * jitter.per_margin * augment.variants


def generate_pretraining_pairs(
    sequences: Seq[Sequence],
    refs_per_seq: int = 20,
    targets_per_ref: int = 6,
    margins: Seq[float] = DEFAULT_MARGINS,
    augment: Augment = Augment(),
    rng_seed: int = 0,
    jitter: Jitter = Jitter(max_shift=0.1),
    min_gap: int = MIN_FRAME_GAP,
) -> Iterator[PatchPair]:
    """Stream query/search pairs; order is fixed by ``rng_seed``.

    Reference and target frames come from the same sequence and are kept at
    least ``min_gap`` frames apart when the sequence is long enough.
    """
    for si, seq in enumerate(sequences):
        rng = np.random.default_rng([rng_seed, si])
        annotated = [i for i in seq.annotated() if tight_box(seq.mask(i)) is not None]
        if not annotated:
            raise DatasetError(f"{seq.name}: no annotated frame contains a target")
        for ref in _pick(rng, annotated, refs_per_seq):
            query = make_query(seq, ref)
            gap = min_gap
            cands = [t for t in annotated if abs(t - ref) >= gap]
            if not cands:
                log.warning("%s: too short for a %d-frame gap, relaxing to 1", seq.name, min_gap)
                gap = 1
                cands = [t for t in annotated if abs(t - ref) >= gap] or [ref]
            for tgt in _pick(rng, cands, targets_per_ref):
                image, mask = seq.frame(tgt), seq.mask(tgt)
                h, w = mask.shape
                tbox = tight_box(mask)
                box_seed = int(rng.integers(2**63 - 1))
                boxes = sample_search_boxes(tbox, margins, jitter, box_seed, w, h)
                for k, box in enumerate(boxes):
                    search, label = make_search(image, mask, box, tgt)
                    meta = {
                        "sequence": seq.name,
                        "reference_frame": ref,
                        "target_frame": tgt,
                        "margin": float(margins[k // jitter.per_margin]),
                        "box": box.as_list(),
                    }
                    yield from augment_pair(PatchPair(query, search, label, meta), augment)


def generate_finetune_pairs(
    first_frame: np.ndarray,
    first_mask: np.ndarray,
    margins: Seq[float] = DEFAULT_MARGINS,
    target_count: int = 150,
    rng_seed: int = 0,
    max_shift: float = 0.1,
    flips: bool = True,
    frame_index: int = 0,
) -> List[PatchPair]:
    """Pairs for one-shot adaptation, all built from a single annotated frame.

    The first ``len(margins)`` pairs are the unjittered, unflipped crops; the
    rest draw a random translation and a coin-flip mirror.
    """
    query = make_query_from(first_frame, first_mask, frame_index)
    tbox = tight_box(first_mask)
    h, w = first_mask.shape
    rng = np.random.default_rng(rng_seed)
    pairs = []
    for i in range(target_count):
        margin = margins[i % len(margins)]
        base = expand_box(tbox, margin, w, h)
        if i < len(margins):
            box, flip = base, False
        else:
            box = _jittered(base, tbox, Jitter(max_shift=max_shift), rng, w, h)
            flip = flips and bool(rng.random() < 0.5)
        search, label = make_search(first_frame, first_mask, box, frame_index)
        pair = PatchPair(query, search, label, {"margin": float(margin), "box": box.as_list(), "flip": False})
        pairs.append(flip_pair(pair) if flip else pair)
    return pairs


def channel_mean(pairs: Seq[PatchPair]) -> np.ndarray:
    if not pairs:
        return np.zeros(3, dtype=np.float32)
    acc = np.zeros(3)
    for p in pairs:
        acc += p.search.pixels.reshape(-1, 3).mean(axis=0)
    return (acc / len(pairs)).astype(np.float32)
