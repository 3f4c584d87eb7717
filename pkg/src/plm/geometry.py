"""Boxes, masks, patches and the resampling primitives shared by the pipeline.

Conventions
-----------
* Images are float arrays of shape (H, W, 3) with values in [0, 1].
* Masks are boolean arrays of shape (H, W); True marks the target object.
* Network label grids use the opposite numeric convention: 0 = target,
  1 = background.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from PIL import Image

PATCH_SIZE = 100
LABEL_SIZE = 50


class GeometryError(ValueError):
    pass


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in frame pixel coordinates (x, y = top-left corner)."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise GeometryError(f"box must have positive size, got {self}")

    @property
    def x2(self) -> int:
        return self.x + self.w

    @property
    def y2(self) -> int:
        return self.y + self.h

    @property
    def area(self) -> int:
        return self.w * self.h

    def intersection_area(self, other: "Box") -> int:
        iw = min(self.x2, other.x2) - max(self.x, other.x)
        ih = min(self.y2, other.y2) - max(self.y, other.y)
        return max(iw, 0) * max(ih, 0)

    def translate(self, dx: int, dy: int) -> "Box":
        return Box(self.x + dx, self.y + dy, self.w, self.h)

    def clamp(self, frame_w: int, frame_h: int) -> "Box":
        x1, y1 = max(self.x, 0), max(self.y, 0)
        x2, y2 = min(self.x2, frame_w), min(self.y2, frame_h)
        if x2 <= x1 or y2 <= y1:
            raise GeometryError(f"{self} lies outside the {frame_w}x{frame_h} frame")
        return Box(x1, y1, x2 - x1, y2 - y1)

    def slices(self) -> Tuple[slice, slice]:
        return slice(self.y, self.y2), slice(self.x, self.x2)

    def as_list(self) -> list:
        return [self.x, self.y, self.w, self.h]


@dataclass
class Patch:
    """A fixed-size crop of a frame.

    ``mask`` is the foreground mask resampled to patch resolution when the
    patch was cut from an annotated frame.
    """

    pixels: np.ndarray
    source_box: Box
    source_frame_index: int = 0
    mask: Optional[np.ndarray] = None


@dataclass
class ScoreMap:
    values: np.ndarray
    source_box: Box

    def __post_init__(self):
        if self.values.shape != (LABEL_SIZE, LABEL_SIZE):
            raise GeometryError(f"score map must be 50x50, got {self.values.shape}")


def expand_box(b: Box, margin_percent: float, frame_w: int, frame_h: int) -> Box:
    """Grow ``b`` by ``margin_percent`` of each side length, half on each side,
    then clamp to the frame."""
    if margin_percent < 0:
        raise GeometryError("margin must be non-negative")
    gx = margin_percent / 100.0 * b.w / 2.0
    gy = margin_percent / 100.0 * b.h / 2.0
    x1 = _round_half_up(b.x - gx)
    y1 = _round_half_up(b.y - gy)
    x2 = _round_half_up(b.x2 + gx)
    y2 = _round_half_up(b.y2 + gy)
    return Box(x1, y1, x2 - x1, y2 - y1).clamp(frame_w, frame_h)


def overlap_ratio(a: Box, b: Box) -> float:
    """Fraction of box ``a`` covered by box ``b``."""
    return a.intersection_area(b) / a.area


def tight_box(mask: np.ndarray) -> Optional[Box]:
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return None
    return Box(int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1))


def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    # half-pixel centre alignment, edge samples clamped
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    # m[i, j] = share of output bin i covered by input pixel j
    edges = np.arange(n_out + 1) * (n_in / n_out)
    lo = edges[:-1, None]
    hi = edges[1:, None]
    j = np.arange(n_in)[None, :]
    cover = np.clip(np.minimum(hi, j + 1) - np.maximum(lo, j), 0.0, None)
    return cover / cover.sum(axis=1, keepdims=True)


def _separable(my: np.ndarray, arr: np.ndarray, mx: np.ndarray) -> np.ndarray:
    # rows then columns: my @ arr @ mx.T, channels carried along
    rows = np.tensordot(my, arr.astype(np.float64), axes=(1, 0))
    return np.moveaxis(np.tensordot(mx, rows, axes=(1, 1)), 0, 1)


def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a (H, W) or (H, W, C) array."""
    h, w = arr.shape[:2]
    if (h, w) == (out_h, out_w):
        return arr.astype(np.float64, copy=True)
    return _separable(_bilinear_matrix(h, out_h), arr, _bilinear_matrix(w, out_w))


def resize_area(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = arr.shape[:2]
    return _separable(_area_matrix(h, out_h), arr, _area_matrix(w, out_w))


def crop_resize(image: np.ndarray, b: Box, out_size: int = PATCH_SIZE, frame_index: int = 0) -> Patch:
    if b.w < 2 or b.h < 2:
        raise GeometryError("box too small to resample")
    crop = image[b.slices()]
    pixels = resize_bilinear(crop, out_size, out_size).astype(np.float32)
    return Patch(pixels=pixels, source_box=b, source_frame_index=frame_index)


def resize_mask(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resample a boolean mask by area averaging with a 0.5 threshold (ties go
    to foreground)."""
    return resize_area(mask.astype(np.float64), out_h, out_w) >= 0.5


def downsample_label(mask: np.ndarray, b: Box, size: int = LABEL_SIZE) -> np.ndarray:
    """Crop ``mask`` to ``b`` and return the size x size label grid
    (0 = target, 1 = background) as float32."""
    if b.w < 1 or b.h < 1:
        raise GeometryError("box too small to resample")
    fg = resize_mask(mask[b.slices()], size, size)
    return np.where(fg, 0.0, 1.0).astype(np.float32)


def restore_map(s: ScoreMap, frame_w: int, frame_h: int) -> Tuple[np.ndarray, np.ndarray]:
    """Resize a score map back onto its source box.

    Returns ``(values, valid)``; ``values`` is zero wherever ``valid`` is False.
    """
    b = s.source_box
    values = np.zeros((frame_h, frame_w))
    valid = np.zeros((frame_h, frame_w), dtype=bool)
    values[b.slices()] = resize_bilinear(s.values, b.h, b.w)
    valid[b.slices()] = True
    return values, valid


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    return arr.astype(np.float32) / 255.0


def load_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 3:
        arr = arr[..., :3].max(axis=2)
    return arr != 0


def save_mask(path, mask: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path)


def save_image(path, image: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    arr = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)
