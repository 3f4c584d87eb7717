"""Synthetic moving-object sequences with analytic ground truth."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple

import numpy as np
from scipy import ndimage

from .geometry import save_image, save_mask


@dataclass(frozen=True)
class SquareScene:
    width: int = 120
    height: int = 90
    size: int = 24
    start: Tuple[int, int] = (20, 30)
    velocity: Tuple[int, int] = (2, 1)
    color: Tuple[float, float, float] = (0.85, 0.2, 0.15)
    n_frames: int = 20
    shape: str = "square"


def _background(rng, h: int, w: int) -> np.ndarray:
    noise = rng.normal(size=(h, w, 3))
    smooth = ndimage.gaussian_filter(noise, sigma=(6, 6, 0))
    smooth = (smooth - smooth.min()) / (np.ptp(smooth) + 1e-12)
    base = np.array([0.35, 0.5, 0.4])
    return np.clip(base + 0.3 * (smooth - 0.5), 0, 1)


def _object_mask(scene: SquareScene, t: int) -> np.ndarray:
    x0 = scene.start[0] + scene.velocity[0] * t
    y0 = scene.start[1] + scene.velocity[1] * t
    yy, xx = np.mgrid[: scene.height, : scene.width]
    if scene.shape == "disc":
        r = scene.size / 2.0
        return (xx + 0.5 - x0 - r) ** 2 + (yy + 0.5 - y0 - r) ** 2 <= r * r
    return (xx >= x0) & (xx < x0 + scene.size) & (yy >= y0) & (yy < y0 + scene.size)


def render_sequence(scene: SquareScene, seed: int = 0) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """Frames (float RGB) and boolean masks for a moving object over a static
    textured background."""
    rng = np.random.default_rng(seed)
    bg = _background(rng, scene.height, scene.width)
    texture = rng.normal(scale=0.03, size=(scene.height, scene.width, 3))
    frames, masks = [], []
    for t in range(scene.n_frames):
        m = _object_mask(scene, t)
        img = bg.copy()
        img[m] = np.clip(np.asarray(scene.color) + texture[m], 0, 1)
        frames.append(np.round(img * 255) / 255)
        masks.append(m)
    return frames, masks


def write_sequence(root, name: str, frames, masks, annotate_all: bool = True) -> None:
    root = Path(root)
    for t, (img, m) in enumerate(zip(frames, masks)):
        save_image(root / "JPEGImages" / name / f"{t:05d}.png", img)
        if annotate_all or t == 0:
            save_mask(root / "Annotations" / name / f"{t:05d}.png", m)


PALETTE = [
    (0.85, 0.2, 0.15),
    (0.15, 0.25, 0.85),
    (0.9, 0.8, 0.1),
    (0.8, 0.2, 0.8),
    (0.95, 0.95, 0.95),
    (0.1, 0.1, 0.1),
]


def training_scenes(n: int, n_frames: int = 20) -> List[SquareScene]:
    """A varied set of scenes for pretraining fixtures."""
    scenes = []
    for i in range(n):
        scenes.append(
            SquareScene(
                size=18 + 4 * (i % 4),
                start=(10 + 7 * (i % 5), 12 + 5 * (i % 4)),
                velocity=(2 - (i % 3), 1 + (i % 2)),
                color=PALETTE[i % len(PALETTE)],
                n_frames=n_frames,
                shape="disc" if i % 2 else "square",
            )
        )
    return scenes


def write_dataset(root, scenes, seed: int = 0, prefix: str = "synth") -> List[str]:
    names = []
    for i, scene in enumerate(scenes):
        name = f"{prefix}{i:02d}"
        frames, masks = render_sequence(scene, seed=seed + i)
        write_sequence(root, name, frames, masks)
        names.append(name)
    return names
