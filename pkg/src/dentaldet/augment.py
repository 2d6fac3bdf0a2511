"""Label-consistent training augmentation.

Continuous coordinates put pixel ``i`` on the interval ``[i, i + 1)``, so a
horizontal mirror maps ``x`` to ``W - x`` and pixel column ``i`` to
``W - 1 - i``. Mirroring a panoramic radiograph also swaps the patient's left
and right side, so FDI quadrants 1<->2 and 3<->4 are exchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import List, Tuple

import numpy as np
from scipy import ndimage

from .core import BoundingBox, ToothRecord, flip_fdi, flip_quadrant, snap
from .dataio import AnnotationTier
from .errors import DegenerateTransform


@dataclass(frozen=True)
class Sample:
    image: np.ndarray  # H x W or H x W x 1
    records: Tuple[ToothRecord, ...]
    tier: AnnotationTier
    image_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))

    @property
    def height(self) -> int:
        return int(self.image.shape[0])

    @property
    def width(self) -> int:
        return int(self.image.shape[1])


@dataclass(frozen=True)
class AugmentConfig:
    scale: float = 0.2
    rotate_deg: float = 10.0
    translate: float = 0.1
    flip_prob: float = 0.5
    blur_sigmas: Tuple[float, ...] = (0.0, 0.5, 1.0)
    min_visibility: float = 0.25

    def __post_init__(self):
        object.__setattr__(self, "blur_sigmas", tuple(float(s) for s in self.blur_sigmas))
        if not 0.0 <= self.scale < 1.0:
            raise DegenerateTransform(f"scale jitter must lie in [0, 1), got {self.scale}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError(f"flip_prob must lie in [0, 1], got {self.flip_prob}")
        if self.rotate_deg < 0 or self.translate < 0:
            raise ValueError("rotation and translation ranges must be non-negative")
        if not self.blur_sigmas or min(self.blur_sigmas) < 0:
            raise ValueError("blur_sigmas must be a non-empty set of non-negative values")

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(scale=0.0, rotate_deg=0.0, translate=0.0, flip_prob=0.0, blur_sigmas=(0.0,), min_visibility=0.0)


def _flip_record(rec: ToothRecord, width: int) -> ToothRecord:
    b = rec.box
    box = BoundingBox(width - b.x_max, b.y_min, width - b.x_min, b.y_max)
    if rec.fdi is not None:
        return replace(rec, box=box, fdi=flip_fdi(rec.fdi), quadrant=None)
    quadrant = flip_quadrant(rec.quadrant) if rec.quadrant is not None else None
    return replace(rec, box=box, quadrant=quadrant)


def horizontal_flip(sample: Sample) -> Sample:
    image = np.ascontiguousarray(sample.image[:, ::-1])
    records = tuple(_flip_record(r, sample.width) for r in sample.records)
    return replace(sample, image=image, records=records)


def affine_matrix(width, height, scale=1.0, angle_deg=0.0, shift=(0.0, 0.0)) -> np.ndarray:
    """Forward 2x3 map in continuous pixel coordinates: scale/rotate about the centre, then shift."""
    cx, cy = width / 2.0, height / 2.0
    a = math.radians(angle_deg)
    ca, sa = math.cos(a) * scale, math.sin(a) * scale
    lin = np.array([[ca, -sa], [sa, ca]])
    t = np.array([cx, cy]) - lin @ np.array([cx, cy]) + np.asarray(shift, dtype=float)
    return np.hstack([lin, t[:, None]])


def transform_box(box: BoundingBox, matrix: np.ndarray) -> Tuple[float, float, float, float]:
    """Axis-aligned hull of the four transformed corners (unclipped)."""
    corners = np.array(
        [[box.x_min, box.y_min], [box.x_max, box.y_min], [box.x_min, box.y_max], [box.x_max, box.y_max]]
    )
    pts = corners @ matrix[:, :2].T + matrix[:, 2]
    return (pts[:, 0].min(), pts[:, 1].min(), pts[:, 0].max(), pts[:, 1].max())


def _warp_image(image: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    # scipy pulls: output index (row, col) -> input index; pixel centres sit at +0.5
    lin = matrix[:, :2]
    inv = np.linalg.inv(lin)
    t = matrix[:, 2]
    # input_xy = inv @ (out_xy + 0.5 - t) - 0.5, rewritten in (row, col) order
    swap = np.array([[0, 1], [1, 0]])
    inv_rc = swap @ inv @ swap
    offset_xy = inv @ (np.array([0.5, 0.5]) - t) - 0.5
    offset_rc = offset_xy[::-1]
    src = image.astype(np.float64)
    squeeze = src.ndim == 3
    if squeeze:
        src = src[..., 0]
    out = ndimage.affine_transform(src, inv_rc, offset=offset_rc, order=1, mode="constant", cval=0.0)
    if squeeze:
        out = out[..., None]
    return _restore_dtype(out, image.dtype)


def _restore_dtype(values: np.ndarray, dtype) -> np.ndarray:
    if np.issubdtype(dtype, np.integer):
        info = np.iinfo(dtype)
        return np.clip(np.rint(values), info.min, info.max).astype(dtype)
    return values.astype(dtype)


def apply_affine(sample: Sample, matrix: np.ndarray, min_visibility: float = 0.25) -> Sample:
    """Warp pixels and boxes by the same forward affine map, clip, and drop slivers."""
    matrix = np.asarray(matrix, dtype=float)
    if np.linalg.det(matrix[:, :2]) <= 0:
        raise DegenerateTransform(f"affine determinant must be positive: {matrix.tolist()}")
    identity = np.array_equal(matrix, np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))
    image = sample.image if identity else _warp_image(sample.image, matrix)
    w, h = sample.width, sample.height
    kept: List[ToothRecord] = []
    for rec in sample.records:
        x0, y0, x1, y1 = rec.box.as_tuple() if identity else transform_box(rec.box, matrix)
        full = (x1 - x0) * (y1 - y0)
        cx0, cy0 = snap(min(max(x0, 0.0), w)), snap(min(max(y0, 0.0), h))
        cx1, cy1 = snap(min(max(x1, 0.0), w)), snap(min(max(y1, 0.0), h))
        if cx1 <= cx0 or cy1 <= cy0:
            continue
        if (cx1 - cx0) * (cy1 - cy0) < min_visibility * full:
            continue
        kept.append(rec.with_box(BoundingBox(cx0, cy0, cx1, cy1)))
    return replace(sample, image=image, records=tuple(kept))


def gaussian_blur(sample: Sample, sigma: float) -> Sample:
    if sigma <= 0:
        return sample
    src = sample.image.astype(np.float64)
    sig = (sigma, sigma, 0) if src.ndim == 3 else sigma
    out = ndimage.gaussian_filter(src, sigma=sig)
    return replace(sample, image=_restore_dtype(out, sample.image.dtype))


def apply_augmentations(sample: Sample, cfg: AugmentConfig, seed: int) -> Sample:
    """Random flip, scale/rotate/translate and blur, fully determined by ``seed``."""
    rng = np.random.default_rng(seed)
    flip = rng.random() < cfg.flip_prob
    scale = 1.0 + rng.uniform(-cfg.scale, cfg.scale)
    angle = rng.uniform(-cfg.rotate_deg, cfg.rotate_deg)
    shift = rng.uniform(-cfg.translate, cfg.translate, size=2) * np.array([sample.width, sample.height])
    sigma = cfg.blur_sigmas[rng.integers(len(cfg.blur_sigmas))]

    out = horizontal_flip(sample) if flip else sample
    out = apply_affine(out, affine_matrix(sample.width, sample.height, scale, angle, shift), cfg.min_visibility)
    return gaussian_blur(out, sigma)
