"""Synthetic scenes with analytic ground truth, used by tests and demos."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .raster import Frame, MaskMap, save_frame, save_mask

SQUARE_COLOR = (220, 40, 40)


def textured_background(size: int, seed: int = 0) -> np.ndarray:
    """Smooth colour blobs plus fine grain, uint8 (size, size, 3)."""
    rng = np.random.default_rng(seed)
    blobs = gaussian_filter(rng.normal(size=(size, size, 3)), (3, 3, 0))
    blobs = (blobs - blobs.min()) / (blobs.max() - blobs.min()) * 200 + 20
    return np.clip(blobs + rng.normal(0, 10, blobs.shape), 0, 255).astype(np.uint8)


def square_x(t: int, size: int, side: int) -> int:
    """Left edge at time t: 1 px per frame, bouncing between the frame borders."""
    span = size - side
    if span == 0:
        return 0
    x = t % (2 * span)
    return x if x <= span else 2 * span - x


def translating_square(
    frames: int = 60,
    size: int = 64,
    side: int = 40,
    top: int = 12,
    seed: int = 0,
    static: bool = False,
) -> tuple[list[Frame], list[MaskMap]]:
    """A solid square (class 1) over a static textured background (class 0)."""
    bg = textured_background(size, seed)
    out_frames, out_masks = [], []
    for t in range(frames):
        x = 0 if static else square_x(t, size, side)
        img = bg.copy()
        mask = np.zeros((size, size), dtype=np.int32)
        img[top : top + side, x : x + side] = SQUARE_COLOR
        mask[top : top + side, x : x + side] = 1
        out_frames.append(Frame(img))
        out_masks.append(MaskMap(mask))
    return out_frames, out_masks


def write_scene(root, frames: list[Frame], masks: list[MaskMap] | None = None) -> Path:
    """Write ``<root>/frames/NNNN.ppm`` (and ``masks/NNNN.pgm``)."""
    root = Path(root)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    for t, f in enumerate(frames):
        save_frame(f, root / "frames" / f"{t:04d}.ppm")
    if masks is not None:
        (root / "masks").mkdir(exist_ok=True)
        for t, m in enumerate(masks):
            save_mask(m, root / "masks" / f"{t:04d}.pgm")
    return root
