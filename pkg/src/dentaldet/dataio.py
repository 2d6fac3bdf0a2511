"""Annotation import/export, co-located box merging and pseudo-label fusion.

The on-disk format is a multi-category variant of the usual detection JSON::

    {"images": [{"id", "file_name", "width", "height"}],
     "annotations": [{"id", "image_id", "bbox": [x, y, w, h],
                      "category_id_1", "category_id_2"?, "category_id_3"?}],
     "categories_1": [{"id", "name"}], "categories_2": [...], "categories_3": [...]}

Category ids are resolved through the name tables, so 0- and 1-based files
both import correctly. Files written by :func:`export_annotations` add a
top-level ``tier`` and per-annotation ``attributes``/``source`` fields so
merged multi-disease records survive a round trip.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from .core import (
    ATTRIBUTE_NAMES,
    AttributeVector,
    BoundingBox,
    Detection,
    FDILabel,
    Source,
    ToothRecord,
    box_iou,
)
from .errors import ConflictingFDI, MalformedFile, TierMismatch, UnknownCategory

log = logging.getLogger(__name__)


class AnnotationTier(str, Enum):
    QUADRANT = "quadrant"
    ENUMERATION = "enumeration"
    DISEASE = "disease"

    @classmethod
    def parse(cls, value) -> "AnnotationTier":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ValueError(f"unknown annotation tier {value!r}") from None


# normalized diagnosis name -> attribute slot
DIAGNOSIS_SLOTS = {
    "impacted": 0,
    "caries": 1,
    "deep caries": 2,
    "periapical lesion": 3,
}


def normalize_name(name: str) -> str:
    return re.sub(r"[\s_\-]+", " ", str(name)).strip().lower()


@dataclass(frozen=True)
class ImageInfo:
    image_id: int
    file_path: str
    width: int
    height: int
    tier: AnnotationTier


@dataclass
class DatasetIndex:
    images: List[ImageInfo] = field(default_factory=list)
    records: Dict[int, List[ToothRecord]] = field(default_factory=dict)

    def image(self, image_id: int) -> ImageInfo:
        for info in self.images:
            if info.image_id == image_id:
                return info
        raise KeyError(image_id)

    def __len__(self) -> int:
        return len(self.images)

    def extend(self, other: "DatasetIndex") -> "DatasetIndex":
        """Concatenate two indices; image ids must not collide."""
        ids = {i.image_id for i in self.images}
        clash = ids.intersection(i.image_id for i in other.images)
        if clash:
            raise ValueError(f"duplicate image ids across datasets: {sorted(clash)[:5]}")
        return DatasetIndex(self.images + other.images, {**self.records, **other.records})


def _category_lookup(table, key: str) -> Dict[int, str]:
    if table is None:
        return {}
    try:
        return {int(c["id"]): str(c["name"]) for c in table}
    except (TypeError, KeyError, ValueError) as exc:
        raise MalformedFile(f"bad {key} table: {exc}") from exc


def _ordinal(cat_id: int, table: Dict[int, str], key: str, upper: int) -> int:
    """Resolve a quadrant/position category id into 1..upper.

    Numeric names win; otherwise the offset from the table's smallest id is
    used, which makes the id base a property of the file rather than a guess.
    """
    if cat_id not in table:
        raise UnknownCategory(f"{key}={cat_id} not declared in categories table")
    name = table[cat_id].strip()
    if name.isdigit():
        value = int(name)
    else:
        value = cat_id - min(table) + 1
    if not 1 <= value <= upper:
        raise UnknownCategory(f"{key}={cat_id} ({name!r}) outside 1..{upper}")
    return value


def _diagnosis_slot(cat_id: int, table: Dict[int, str]) -> int:
    if cat_id not in table:
        raise UnknownCategory(f"category_id_3={cat_id} not declared in categories table")
    slot = DIAGNOSIS_SLOTS.get(normalize_name(table[cat_id]))
    if slot is None:
        raise UnknownCategory(f"unknown diagnosis {table[cat_id]!r}")
    return slot


def _clip_box(x, y, w, h, width, height) -> BoundingBox:
    x0 = min(max(float(x), 0.0), float(width))
    y0 = min(max(float(y), 0.0), float(height))
    x1 = min(max(float(x) + float(w), 0.0), float(width))
    y1 = min(max(float(y) + float(h), 0.0), float(height))
    return BoundingBox(x0, y0, x1, y1)


def _default_tables():
    return {
        "categories_1": [{"id": i, "name": str(i + 1)} for i in range(4)],
        "categories_2": [{"id": i, "name": str(i + 1)} for i in range(8)],
        "categories_3": [
            {"id": 0, "name": "Caries"},
            {"id": 1, "name": "Deep Caries"},
            {"id": 2, "name": "Periapical Lesion"},
            {"id": 3, "name": "Impacted"},
        ],
    }


def import_annotations(file_path, tier, image_root=None) -> DatasetIndex:
    """Read an annotation file into a :class:`DatasetIndex` (one record per raw annotation).

    ``image_root`` defaults to the directory holding the annotation file.
    """
    tier = AnnotationTier.parse(tier)
    path = Path(file_path)
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise MalformedFile(f"{path}: {exc}") from exc
    if not isinstance(data, dict) or "images" not in data or "annotations" not in data:
        raise MalformedFile(f"{path}: expected top-level 'images' and 'annotations'")
    declared = data.get("tier")
    if declared is not None and AnnotationTier.parse(declared) is not tier:
        raise TierMismatch(f"{path}: file declares tier {declared!r}, imported as {tier.value!r}")

    defaults = _default_tables()
    tables = {
        key: _category_lookup(data.get(key, defaults[key]), key)
        for key in ("categories_1", "categories_2", "categories_3")
    }
    root = Path(image_root) if image_root is not None else path.parent

    index = DatasetIndex()
    sizes = {}
    try:
        for img in data["images"]:
            image_id = int(img["id"])
            fp = Path(img["file_name"])
            info = ImageInfo(
                image_id=image_id,
                file_path=str((fp if fp.is_absolute() else root / fp).resolve()),
                width=int(img["width"]),
                height=int(img["height"]),
                tier=tier,
            )
            index.images.append(info)
            index.records[image_id] = []
            sizes[image_id] = (info.width, info.height)
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedFile(f"{path}: bad image entry: {exc}") from exc

    for ann in data["annotations"]:
        index.records.setdefault(_image_key(ann, sizes, path), []).append(
            _parse_annotation(ann, tier, tables, sizes, path)
        )
    return index


def _image_key(ann, sizes, path) -> int:
    try:
        image_id = int(ann["image_id"])
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedFile(f"{path}: annotation without image_id: {exc}") from exc
    if image_id not in sizes:
        raise MalformedFile(f"{path}: annotation references unknown image {image_id}")
    return image_id


def _parse_annotation(ann, tier, tables, sizes, path) -> ToothRecord:
    ann_id = ann.get("id")
    has_q = ann.get("category_id_1") is not None
    has_p = ann.get("category_id_2") is not None
    has_d = ann.get("category_id_3") is not None
    has_attrs = ann.get("attributes") is not None
    if not has_q:
        raise TierMismatch(f"{path}: annotation {ann_id} lacks category_id_1 (quadrant)")
    if tier is AnnotationTier.QUADRANT and (has_p or has_d or has_attrs):
        raise TierMismatch(f"{path}: quadrant-tier annotation {ann_id} carries enumeration/diagnosis")
    if tier is AnnotationTier.ENUMERATION and (not has_p or has_d or has_attrs):
        raise TierMismatch(f"{path}: enumeration-tier annotation {ann_id} must have position and no diagnosis")
    if tier is AnnotationTier.DISEASE and (not has_p or not (has_d or has_attrs)):
        raise TierMismatch(f"{path}: disease-tier annotation {ann_id} must have position and diagnosis")

    try:
        x, y, w, h = (float(v) for v in ann["bbox"])
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedFile(f"{path}: annotation {ann_id} has bad bbox: {exc}") from exc
    width, height = sizes[int(ann["image_id"])]
    try:
        box = _clip_box(x, y, w, h, width, height)
    except ValueError as exc:
        raise MalformedFile(f"{path}: annotation {ann_id}: {exc}") from exc

    quadrant = _ordinal(int(ann["category_id_1"]), tables["categories_1"], "category_id_1", 4)
    fdi = None
    if has_p:
        position = _ordinal(int(ann["category_id_2"]), tables["categories_2"], "category_id_2", 8)
        fdi = FDILabel(quadrant, position)

    attributes = None
    if has_attrs:
        flags = ann["attributes"]
        if isinstance(flags, dict):
            flags = [flags.get(n, False) for n in ATTRIBUTE_NAMES]
        attributes = AttributeVector(*(bool(f) for f in flags))
        if has_d:
            extra = [False] * 4
            extra[_diagnosis_slot(int(ann["category_id_3"]), tables["categories_3"])] = True
            attributes = attributes.logical_or(AttributeVector(*extra))
    elif has_d:
        flags = [False] * 4
        flags[_diagnosis_slot(int(ann["category_id_3"]), tables["categories_3"])] = True
        attributes = AttributeVector(*flags)

    try:
        source = Source(ann.get("source", Source.ANNOTATED.value))
    except ValueError as exc:
        raise MalformedFile(f"{path}: annotation {ann_id}: {exc}") from exc
    return ToothRecord(box=box, fdi=fdi, attributes=attributes, source=source, quadrant=quadrant)


def export_annotations(index: DatasetIndex, file_path, tier=None) -> None:
    """Write ``index`` in the canonical format (inverse of :func:`import_annotations`).

    Quadrant and position ids are written 0-based; diagnoses are carried in
    the ``attributes`` list so several flags fit on one box.
    """
    tiers = {info.tier for info in index.images}
    if tier is None:
        if len(tiers) > 1:
            raise ValueError("mixed-tier index; export each tier separately")
        tier = tiers.pop() if tiers else AnnotationTier.ENUMERATION
    tier = AnnotationTier.parse(tier)
    path = Path(file_path)
    out = {"tier": tier.value, "images": [], "annotations": [], **_default_tables()}
    ann_id = 0
    for info in index.images:
        fp = Path(info.file_path)
        try:
            name = str(fp.resolve().relative_to(path.parent.resolve()))
        except ValueError:
            name = str(fp.resolve())
        out["images"].append(
            {"id": info.image_id, "file_name": name, "width": info.width, "height": info.height}
        )
        for rec in index.records.get(info.image_id, []):
            b = rec.box
            ann = {
                "id": ann_id,
                "image_id": info.image_id,
                "bbox": [b.x_min, b.y_min, b.x_max - b.x_min, b.y_max - b.y_min],
                "category_id_1": rec.quadrant - 1,
                "source": rec.source.value,
            }
            if rec.fdi is not None:
                ann["category_id_2"] = rec.fdi.position - 1
            if rec.attributes is not None:
                ann["attributes"] = [bool(a) for a in rec.attributes]
            out["annotations"].append(ann)
            ann_id += 1
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(out, indent=1))


def merge_colocated_boxes(records: Sequence[ToothRecord], iou_min: float = 0.9) -> List[ToothRecord]:
    """Collapse near-identical boxes of one image into single multi-attribute records.

    Boxes are clustered by single linkage on IoU >= ``iou_min``. A cluster
    becomes one record with the coordinate-wise union box and the OR of all
    attribute flags. Output order follows the first member of each cluster.
    """
    if not 0.0 < iou_min <= 1.0:
        raise ValueError(f"iou_min must lie in (0, 1], got {iou_min}")
    n = len(records)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if box_iou(records[i].box, records[j].box) >= iou_min:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)

    clusters: Dict[int, List[int]] = {}
    for i in range(n):
        clusters.setdefault(find(i), []).append(i)

    merged = []
    for members in clusters.values():
        if len(members) == 1:
            merged.append(records[members[0]])
            continue
        group = [records[i] for i in members]
        fdis = {r.fdi for r in group}
        quads = {r.quadrant for r in group}
        if len(fdis) > 1 or len(quads) > 1:
            codes = sorted(str(f) for f in fdis)
            raise ConflictingFDI(f"co-located boxes carry different labels: {codes}")
        box = group[0].box
        for r in group[1:]:
            box = box.union(r.box)
        attrs = None
        for r in group:
            if r.attributes is not None:
                attrs = r.attributes if attrs is None else attrs.logical_or(r.attributes)
        if attrs is not None:
            attrs = AttributeVector(*(bool(a) for a in attrs))
        sources = {r.source for r in group}
        source = Source.ANNOTATED if Source.ANNOTATED in sources else Source.PSEUDO
        merged.append(ToothRecord(box=box, fdi=group[0].fdi, attributes=attrs, source=source, quadrant=group[0].quadrant))
    return merged


@dataclass
class FusionSummary:
    accepted: int = 0
    low_confidence: int = 0
    overlapping: int = 0
    duplicate_fdi: int = 0


def fuse_pseudo_labels(
    annotated: Sequence[ToothRecord],
    pseudo: Sequence[Detection],
    conf_min: float = 0.5,
    iou_max: float = 0.5,
    summary: Optional[FusionSummary] = None,
) -> List[ToothRecord]:
    """Complete a disease-tier image with healthy teeth from a tooth detector.

    Detections are visited by descending confidence. One is accepted when its
    confidence reaches ``conf_min``, its IoU with every annotated box stays
    below ``iou_max`` and its argmax FDI is not already present. Accepted
    teeth are appended with all attributes false.
    """
    summary = summary if summary is not None else FusionSummary()
    out = list(annotated)
    taken = {r.fdi for r in annotated if r.fdi is not None}
    order = sorted(range(len(pseudo)), key=lambda i: (-pseudo[i].confidence, i))
    for i in order:
        det = pseudo[i]
        if det.confidence < conf_min:
            summary.low_confidence += 1
            continue
        if any(box_iou(det.box, r.box) >= iou_max for r in annotated):
            summary.overlapping += 1
            continue
        fdi = det.label
        if fdi in taken:
            summary.duplicate_fdi += 1
            continue
        taken.add(fdi)
        out.append(ToothRecord(box=det.box, fdi=fdi, attributes=AttributeVector.none(), source=Source.PSEUDO))
        summary.accepted += 1
    log.debug("pseudo-label fusion: %s", summary)
    return out


# ---------------------------------------------------------------------------
# prediction files

def detection_to_dict(det: Detection) -> dict:
    out = {
        "bbox": list(det.box.as_tuple()),
        "confidence": det.confidence,
        "class_probs": list(det.class_probs),
        "attribute_probs": [float(a) for a in det.attribute_probs],
    }
    if det.assigned_fdi is not None:
        out["assigned_fdi"] = det.assigned_fdi.code()
    return out


def detection_from_dict(d: dict) -> Detection:
    try:
        assigned = d.get("assigned_fdi")
        return Detection(
            box=BoundingBox(*(float(v) for v in d["bbox"])),
            class_probs=tuple(float(p) for p in d["class_probs"]),
            attribute_probs=AttributeVector(*(float(a) for a in d["attribute_probs"])),
            confidence=float(d["confidence"]),
            assigned_fdi=FDILabel.from_code(assigned) if assigned is not None else None,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedFile(f"bad detection entry: {exc}") from exc


def save_predictions(predictions: Dict[int, List[Detection]], file_path) -> None:
    """Write ``{"images": [{"image_id", "detections": [...]}]}`` sorted by image id."""
    out = {
        "images": [
            {"image_id": int(k), "detections": [detection_to_dict(d) for d in predictions[k]]}
            for k in sorted(predictions)
        ]
    }
    path = Path(file_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(out))


def load_predictions(file_path) -> Dict[int, List[Detection]]:
    path = Path(file_path)
    try:
        data = json.loads(path.read_text())
        entries = data["images"]
        return {int(e["image_id"]): [detection_from_dict(d) for d in e["detections"]] for e in entries}
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise MalformedFile(f"{path}: {exc}") from exc

