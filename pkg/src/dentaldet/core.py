"""Domain types for teeth, boxes and attributes, plus FDI numbering helpers.

FDI codes are two digits: quadrant (1 upper-right, 2 upper-left, 3 lower-left,
4 lower-right, from the patient's perspective) followed by the position
counted from the midline (1..8). Classes are ordered quadrant-major so each
quadrant occupies a contiguous slice of 8 class indices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Optional, Sequence, Tuple

NUM_CLASSES = 32
NUM_QUADRANTS = 4
POSITIONS_PER_QUADRANT = 8
ATTRIBUTE_NAMES = ("is_impacted", "has_caries", "has_deepcaries", "has_lesion")
NUM_ATTRIBUTES = len(ATTRIBUTE_NAMES)

_FLIP_QUADRANT = {1: 2, 2: 1, 3: 4, 4: 3}


@dataclass(frozen=True, order=True)
class FDILabel:
    quadrant: int
    position: int

    def __post_init__(self):
        if self.quadrant not in (1, 2, 3, 4):
            raise ValueError(f"quadrant must be 1..4, got {self.quadrant}")
        if not 1 <= self.position <= POSITIONS_PER_QUADRANT:
            raise ValueError(f"position must be 1..8, got {self.position}")

    def code(self) -> int:
        return 10 * self.quadrant + self.position

    @classmethod
    def from_code(cls, code: int) -> "FDILabel":
        return cls(int(code) // 10, int(code) % 10)

    def __str__(self) -> str:
        return str(self.code())


def class_index(fdi: FDILabel) -> int:
    """Map an FDI label onto 0..31 (11 -> 0, 18 -> 7, 21 -> 8, ..., 48 -> 31)."""
    return POSITIONS_PER_QUADRANT * (fdi.quadrant - 1) + (fdi.position - 1)


def fdi_from_index(index: int) -> FDILabel:
    if not 0 <= index < NUM_CLASSES:
        raise ValueError(f"class index out of range: {index}")
    q, p = divmod(int(index), POSITIONS_PER_QUADRANT)
    return FDILabel(q + 1, p + 1)


def flip_quadrant(quadrant: int) -> int:
    return _FLIP_QUADRANT[quadrant]


def flip_fdi(fdi: FDILabel) -> FDILabel:
    """Mirror a tooth label left/right: quadrants 1<->2 and 3<->4."""
    return FDILabel(_FLIP_QUADRANT[fdi.quadrant], fdi.position)


ALL_FDI = tuple(fdi_from_index(i) for i in range(NUM_CLASSES))


@dataclass(frozen=True)
class AttributeVector:
    """Four disease attributes in fixed order.

    Entries are booleans for ground truth and probabilities for predictions.
    """

    is_impacted: float = False
    has_caries: float = False
    has_deepcaries: float = False
    has_lesion: float = False

    def __post_init__(self):
        for name in ATTRIBUTE_NAMES:
            v = getattr(self, name)
            if not isinstance(v, bool) and not (0.0 <= float(v) <= 1.0):
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    def as_tuple(self) -> tuple:
        return tuple(getattr(self, n) for n in ATTRIBUTE_NAMES)

    def __iter__(self):
        return iter(self.as_tuple())

    def __len__(self) -> int:
        return NUM_ATTRIBUTES

    def __getitem__(self, i: int):
        return self.as_tuple()[i]

    @classmethod
    def from_sequence(cls, values: Sequence) -> "AttributeVector":
        if len(values) != NUM_ATTRIBUTES:
            raise ValueError(f"expected {NUM_ATTRIBUTES} attributes, got {len(values)}")
        return cls(*values)

    @classmethod
    def none(cls) -> "AttributeVector":
        return cls(False, False, False, False)

    def logical_or(self, other: "AttributeVector") -> "AttributeVector":
        return AttributeVector(*(bool(a) or bool(b) for a, b in zip(self, other)))


BOX_GRID = float(2 ** 20)


def snap(value: float) -> float:
    """Round a pixel coordinate to the box grid."""
    return round(float(value) * BOX_GRID) / BOX_GRID


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in corner form, pixel units.

    Coordinates are snapped to a 2**-20 px grid on construction so that
    mirroring (``W - x``) is exact and a double flip restores the box bit for bit.
    """

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if all(math.isfinite(c) for c in coords):
            coords = tuple(snap(c) for c in coords)
            for name, c in zip(("x_min", "y_min", "x_max", "y_max"), coords):
                object.__setattr__(self, name, c)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates {coords}")
        if min(coords) < 0:
            raise ValueError(f"negative box coordinates {coords}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {coords}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @classmethod
    def from_xywh(cls, x, y, w, h) -> "BoundingBox":
        return cls(x, y, x + w, y + h)

    def union(self, other: "BoundingBox") -> "BoundingBox":
        return BoundingBox(
            min(self.x_min, other.x_min),
            min(self.y_min, other.y_min),
            max(self.x_max, other.x_max),
            max(self.y_max, other.y_max),
        )


def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


class Source(str, Enum):
    ANNOTATED = "annotated"
    PSEUDO = "pseudo"


@dataclass(frozen=True)
class ToothRecord:
    """Ground-truth tooth.

    ``fdi`` is None for quadrant-tier records, which carry ``quadrant`` only.
    ``attributes`` is None unless the record comes from the disease tier.
    """

    box: BoundingBox
    fdi: Optional[FDILabel] = None
    attributes: Optional[AttributeVector] = None
    source: Source = Source.ANNOTATED
    quadrant: Optional[int] = None

    def __post_init__(self):
        if self.fdi is not None:
            if self.quadrant is None:
                object.__setattr__(self, "quadrant", self.fdi.quadrant)
            elif self.quadrant != self.fdi.quadrant:
                raise ValueError(f"quadrant {self.quadrant} disagrees with FDI {self.fdi}")
        if self.quadrant is not None and self.quadrant not in (1, 2, 3, 4):
            raise ValueError(f"quadrant must be 1..4, got {self.quadrant}")
        if self.source is Source.PSEUDO and self.attributes is not None and any(self.attributes):
            raise ValueError("pseudo-labelled teeth must have all attributes false")

    def with_box(self, box: BoundingBox) -> "ToothRecord":
        return replace(self, box=box)


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    class_probs: Tuple[float, ...]
    attribute_probs: AttributeVector
    confidence: float
    assigned_fdi: Optional[FDILabel] = field(default=None)

    def __post_init__(self):
        probs = tuple(float(p) for p in self.class_probs)
        if len(probs) != NUM_CLASSES:
            raise ValueError(f"class_probs must have {NUM_CLASSES} entries, got {len(probs)}")
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise ValueError("class_probs entries must lie in [0, 1]")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must lie in [0, 1], got {self.confidence}")
        object.__setattr__(self, "class_probs", probs)
        if not isinstance(self.attribute_probs, AttributeVector):
            object.__setattr__(self, "attribute_probs", AttributeVector.from_sequence(self.attribute_probs))

    def argmax_fdi(self) -> FDILabel:
        best = max(range(NUM_CLASSES), key=lambda k: (self.class_probs[k], -k))
        return fdi_from_index(best)

    @property
    def label(self) -> FDILabel:
        """The assigned label when post-processed, otherwise the argmax."""
        return self.assigned_fdi if self.assigned_fdi is not None else self.argmax_fdi()


def quadrant_slices() -> Iterable[slice]:
    for q in range(NUM_QUADRANTS):
        yield slice(q * POSITIONS_PER_QUADRANT, (q + 1) * POSITIONS_PER_QUADRANT)
