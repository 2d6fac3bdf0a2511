"""Image loading and square letterboxing."""

from __future__ import annotations

from typing import List, Sequence, Tuple

import numpy as np
from PIL import Image

from .core import BoundingBox, ToothRecord


def load_gray(path) -> np.ndarray:
    """Read an image as H x W uint8; RGB files are reduced to luminance."""
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I"):
            arr = np.asarray(im, dtype=np.float64)
            arr = 255.0 * (arr - arr.min()) / max(arr.max() - arr.min(), 1.0)
            return arr.astype(np.uint8)
        return np.asarray(im.convert("L"), dtype=np.uint8)


def save_gray(image: np.ndarray, path) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path)


def letterbox(image: np.ndarray, size: int) -> Tuple[np.ndarray, float]:
    """Resize so the longer side equals ``size`` and pad bottom/right with zeros.

    Returns a float32 ``size x size`` array in [0, 1] and the scale factor
    from original to letterboxed pixels.
    """
    if image.ndim == 3:
        image = image[..., 0]
    h, w = image.shape
    scale = size / max(h, w)
    nh, nw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    src = np.asarray(image, dtype=np.float32)
    if (nh, nw) != (h, w):
        src = np.asarray(Image.fromarray(src, mode="F").resize((nw, nh), Image.BILINEAR), dtype=np.float32)
    canvas = np.zeros((size, size), dtype=np.float32)
    canvas[:nh, :nw] = src / 255.0
    return canvas, scale


def scale_records(records: Sequence[ToothRecord], scale: float) -> List[ToothRecord]:
    out = []
    for r in records:
        b = r.box
        out.append(r.with_box(BoundingBox(b.x_min * scale, b.y_min * scale, b.x_max * scale, b.y_max * scale)))
    return out
