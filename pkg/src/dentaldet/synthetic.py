"""Procedural panoramic-like images with known teeth, for smoke tests and demos.

Teeth are drawn as bright blocks in two arches. Position 1 sits next to the
midline and molars (6-8) are wider. Disease flags leave visible marks: a
small dark notch (caries), a larger one (deep caries), a dark spot at the
root end (lesion) and a dark diagonal stripe (impacted).
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from .core import AttributeVector, BoundingBox, Detection, FDILabel, ToothRecord, class_index
from .dataio import AnnotationTier, DatasetIndex, ImageInfo, export_annotations, save_predictions
from .imaging import save_gray

# relative tooth widths, position 1 (central incisor) to 8 (third molar)
TOOTH_WIDTHS = (0.85, 0.75, 0.85, 0.85, 0.9, 1.2, 1.15, 1.05)


def tooth_layout(width: int, height: int, dx: float = 0.0, dy: float = 0.0) -> Dict[FDILabel, Tuple[float, float, float, float]]:
    """Nominal box of each of the 32 teeth. Quadrant 1 is the upper arch on the image's left."""
    half = 0.45 * width
    unit = half / sum(TOOTH_WIDTHS)
    mid = width / 2.0 + dx
    rows = {"upper": (0.14 * height + dy, 0.47 * height + dy), "lower": (0.53 * height + dy, 0.86 * height + dy)}
    out = {}
    for quadrant, arch, side in ((1, "upper", -1), (2, "upper", 1), (3, "lower", 1), (4, "lower", -1)):
        y0, y1 = rows[arch]
        offset = 1.0
        for pos in range(1, 9):
            w = TOOTH_WIDTHS[pos - 1] * unit
            a, b = offset, offset + w - 1.5
            x0, x1 = (mid + a, mid + b) if side > 0 else (mid - b, mid - a)
            out[FDILabel(quadrant, pos)] = (x0, y0, x1, y1)
            offset += w
    return out


def render_image(rng: np.random.Generator, width: int, height: int, teeth: Dict[FDILabel, Tuple[Tuple[float, float, float, float], AttributeVector]]) -> np.ndarray:
    img = rng.normal(35.0, 6.0, size=(height, width))
    yy, xx = np.mgrid[0:height, 0:width]
    # soft jaw band
    img += 25.0 * np.exp(-(((yy - height / 2) / (0.35 * height)) ** 2))
    for fdi, (box, attrs) in teeth.items():
        x0, y0, x1, y1 = (int(round(v)) for v in box)
        tone = 165.0 + 4.0 * fdi.position + rng.normal(0, 4)
        img[y0:y1, x0:x1] = tone + rng.normal(0, 5, size=(y1 - y0, x1 - x0))
        upper = fdi.quadrant in (1, 2)
        h = y1 - y0
        # crown faces the occlusal plane: bottom of upper teeth, top of lower teeth
        crown_y = y1 - h // 4 if upper else y0 + h // 4
        root_y = y0 + 3 if upper else y1 - 4
        cx = (x0 + x1) // 2
        if attrs.has_caries:
            img[crown_y - 2 : crown_y + 1, cx - 2 : cx + 1] = 60.0
        if attrs.has_deepcaries:
            img[crown_y - 4 : crown_y + 3, cx - 3 : cx + 3] = 40.0
        if attrs.has_lesion:
            mask = (yy - root_y) ** 2 + (xx - cx) ** 2 <= 9
            img[mask] = 25.0
        if attrs.is_impacted:
            for t in range(min(x1 - x0, h)):
                yl = y0 + int(t * h / max(x1 - x0, 1))
                img[max(yl - 1, y0) : min(yl + 1, y1), min(x0 + t, x1 - 1)] = 70.0
    return np.clip(img, 0, 255).astype(np.uint8)


def random_teeth(rng: np.random.Generator, width: int, height: int, max_missing: int = 4, disease_rate: float = 0.2):
    layout = tooth_layout(width, height, rng.uniform(-4, 4), rng.uniform(-3, 3))
    labels = sorted(layout)
    missing = set(rng.choice(len(labels), size=rng.integers(0, max_missing + 1), replace=False).tolist())
    teeth = {}
    for i, fdi in enumerate(labels):
        if i in missing:
            continue
        x0, y0, x1, y1 = layout[fdi]
        x0 += rng.uniform(-0.7, 0.7)
        x1 += rng.uniform(-0.7, 0.7)
        y0 += rng.uniform(-2, 2)
        y1 += rng.uniform(-2, 2)
        flags = [False] * 4
        if rng.random() < disease_rate:
            flags[int(rng.integers(4))] = True
            if rng.random() < 0.3:
                flags[int(rng.integers(4))] = True
        teeth[fdi] = ((x0, y0, x1, y1), AttributeVector(*flags))
    return teeth


def make_synthetic_dataset(
    out_dir,
    n_images: int = 8,
    seed: int = 0,
    width: int = 256,
    height: int = 128,
    tier: AnnotationTier = AnnotationTier.DISEASE,
    first_id: int = 1,
) -> Tuple[DatasetIndex, Path]:
    """Write PNGs plus a canonical annotation file; return the index and the file path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    index = DatasetIndex()
    for k in range(n_images):
        image_id = first_id + k
        teeth = random_teeth(rng, width, height)
        img = render_image(rng, width, height, teeth)
        path = out / f"synthetic_{image_id:04d}.png"
        save_gray(img, path)
        index.images.append(ImageInfo(image_id, str(path.resolve()), width, height, tier))
        recs = []
        for fdi, (box, attrs) in sorted(teeth.items()):
            b = BoundingBox(*(round(v, 3) for v in box))
            if tier is AnnotationTier.QUADRANT:
                recs.append(ToothRecord(box=b, quadrant=fdi.quadrant))
            elif tier is AnnotationTier.ENUMERATION:
                recs.append(ToothRecord(box=b, fdi=fdi))
            else:
                recs.append(ToothRecord(box=b, fdi=fdi, attributes=attrs))
        index.records[image_id] = recs
    ann_path = out / f"annotations_{tier.value}.json"
    export_annotations(index, ann_path, tier)
    return index, ann_path


DIAGNOSIS_IDS = {1: 0, 2: 1, 3: 2, 0: 3}  # attribute slot -> category_id_3 (caries, deep caries, lesion, impacted)


def write_raw_disease_files(index: DatasetIndex, out_dir, seed: int = 0) -> Tuple[Path, Path]:
    """Split a fully labelled disease-tier index into challenge-style raw files.

    The annotation file lists only diseased teeth, one box per disease (so a
    tooth with two findings appears twice, slightly jittered). The healthy
    teeth go to a prediction file as confident detector outputs, ready for
    pseudo-label fusion.
    """
    rng = np.random.default_rng(seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ann = {
        "images": [],
        "annotations": [],
        "categories_1": [{"id": i, "name": str(i + 1)} for i in range(4)],
        "categories_2": [{"id": i, "name": str(i + 1)} for i in range(8)],
        "categories_3": [{"id": 0, "name": "Caries"}, {"id": 1, "name": "Deep Caries"},
                         {"id": 2, "name": "Periapical Lesion"}, {"id": 3, "name": "Impacted"}],
    }
    pseudo: Dict[int, List[Detection]] = {}
    next_id = 0
    for info in index.images:
        ann["images"].append({"id": info.image_id, "file_name": info.file_path, "width": info.width, "height": info.height})
        pseudo[info.image_id] = []
        for rec in index.records[info.image_id]:
            b = rec.box
            flags = [i for i, f in enumerate(rec.attributes or ()) if f]
            if flags:
                for slot in flags:
                    j = rng.uniform(-0.1, 0.1, size=2)
                    ann["annotations"].append({
                        "id": next_id, "image_id": info.image_id,
                        "bbox": [b.x_min + j[0], b.y_min + j[1], b.width, b.height],
                        "category_id_1": rec.fdi.quadrant - 1, "category_id_2": rec.fdi.position - 1,
                        "category_id_3": DIAGNOSIS_IDS[slot],
                    })
                    next_id += 1
            else:
                probs = np.full(32, 0.02)
                probs[class_index(rec.fdi)] = 0.9
                pseudo[info.image_id].append(
                    Detection(b, tuple(probs), AttributeVector(0.0, 0.0, 0.0, 0.0), confidence=0.9)
                )
    ann_path = out / "raw_disease.json"
    ann_path.write_text(json.dumps(ann, indent=1))
    pseudo_path = out / "pseudo_detections.json"
    save_predictions(pseudo, pseudo_path)
    return ann_path, pseudo_path
