"""Average precision along the quadrant, enumeration and diagnosis axes.

AP follows the common detection-benchmark recipe: per class and IoU
threshold, predictions are matched greedily by descending score to the best
still-unmatched ground truth, and precision is interpolated at 101 recall
points. The headline number averages over IoU 0.50:0.05:0.95 and over the
classes that occur in the ground truth; AP at IoU 0.5 is reported alongside.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, NamedTuple, Sequence, Tuple

import numpy as np

from .core import ATTRIBUTE_NAMES, Detection, ToothRecord, class_index, fdi_from_index
from .errors import MissingAssignedLabels
from .postprocess import iou_matrix

COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.arange(101) / 100.0
AXES = ("quadrant", "diagnosis", "enumeration")


class EvalEntry(NamedTuple):
    image_id: int
    box: Tuple[float, float, float, float]
    label: int
    score: float = 1.0


@dataclass(frozen=True)
class EvalConfig:
    attr_threshold: float = 0.5
    diag_score: str = "conf_x_attr"
    iou_thresholds: Tuple[float, ...] = COCO_THRESHOLDS

    def __post_init__(self):
        if self.diag_score not in ("conf_x_attr", "attr", "conf"):
            raise ValueError(f"eval.diag_score must be conf_x_attr, attr or conf; got {self.diag_score!r}")
        object.__setattr__(self, "iou_thresholds", tuple(float(t) for t in self.iou_thresholds))


def match_class(preds: Sequence[EvalEntry], gts: Sequence[EvalEntry], iou_thr: float) -> np.ndarray:
    """TP flags for ``preds`` (one class) in descending-score order."""
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
    by_image: Dict[int, List[int]] = {}
    for j, g in enumerate(gts):
        by_image.setdefault(g.image_id, []).append(j)
    gt_boxes = np.array([g.box for g in gts], dtype=np.float64).reshape(-1, 4)
    used = np.zeros(len(gts), dtype=bool)
    flags = np.zeros(len(preds), dtype=bool)
    for rank, i in enumerate(order):
        cands = by_image.get(preds[i].image_id)
        if not cands:
            continue
        cands = np.array(cands)
        ious = iou_matrix(np.array([preds[i].box], dtype=np.float64), gt_boxes[cands])[0]
        ious[used[cands]] = -1.0
        best = int(np.argmax(ious))
        if ious[best] >= iou_thr:
            used[cands[best]] = True
            flags[rank] = True
    return flags


def pr_curve(tp_flags: np.ndarray, num_gt: int) -> Tuple[np.ndarray, np.ndarray]:
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(~tp_flags)
    recall = tp / max(num_gt, 1)
    precision = tp / np.maximum(tp + fp, 1)
    return recall, precision


def interpolated_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    if recall.size == 0:
        return 0.0
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    values = np.where(idx < recall.size, envelope[np.minimum(idx, recall.size - 1)], 0.0)
    return float(values.mean())


def class_ap(preds: Sequence[EvalEntry], gts: Sequence[EvalEntry], iou_thr: float) -> float:
    if not gts:
        return 0.0
    recall, precision = pr_curve(match_class(preds, gts, iou_thr), len(gts))
    return interpolated_ap(recall, precision)


def per_class_ap(preds: Sequence[EvalEntry], gts: Sequence[EvalEntry], iou_thresholds: Sequence[float]) -> Dict[int, np.ndarray]:
    """AP per ground-truth class, one value per threshold."""
    pred_by, gt_by = _group(preds), _group(gts)
    return {
        label: np.array([class_ap(pred_by.get(label, []), g, t) for t in iou_thresholds])
        for label, g in sorted(gt_by.items())
    }


def average_precision(preds: Sequence[EvalEntry], gts: Sequence[EvalEntry], iou_thresholds: Sequence[float] = COCO_THRESHOLDS) -> float:
    """Mean over ground-truth classes and IoU thresholds; 0 when there is no ground truth."""
    table = per_class_ap(preds, gts, iou_thresholds)
    if not table:
        return 0.0
    return float(np.mean([v.mean() for v in table.values()]))


def _group(entries: Iterable[EvalEntry]) -> Dict[int, List[EvalEntry]]:
    out: Dict[int, List[EvalEntry]] = {}
    for e in entries:
        out.setdefault(int(e.label), []).append(e)
    return out


# ---------------------------------------------------------------------------
# three-axis report

def axis_entries(detections: Mapping[int, Sequence[Detection]], gts: Mapping[int, Sequence[ToothRecord]], cfg: EvalConfig = EvalConfig()):
    """Project detections and ground truth onto the three label axes."""
    preds = {a: [] for a in AXES}
    truth = {a: [] for a in AXES}
    for image_id in sorted(set(detections) | set(gts)):
        for det in detections.get(image_id, ()):
            if det.assigned_fdi is None:
                raise MissingAssignedLabels(f"image {image_id}: detection without assigned_fdi; run postprocess first")
            box = det.box.as_tuple()
            k = class_index(det.assigned_fdi)
            preds["enumeration"].append(EvalEntry(image_id, box, k, det.confidence))
            preds["quadrant"].append(EvalEntry(image_id, box, det.assigned_fdi.quadrant - 1, det.confidence))
            for a, p in enumerate(det.attribute_probs):
                if p >= cfg.attr_threshold:
                    score = {"conf_x_attr": det.confidence * p, "attr": p, "conf": det.confidence}[cfg.diag_score]
                    preds["diagnosis"].append(EvalEntry(image_id, box, a, float(score)))
        for rec in gts.get(image_id, ()):
            box = rec.box.as_tuple()
            if rec.fdi is not None:
                truth["enumeration"].append(EvalEntry(image_id, box, class_index(rec.fdi)))
            if rec.quadrant is not None:
                truth["quadrant"].append(EvalEntry(image_id, box, rec.quadrant - 1))
            if rec.attributes is not None:
                for a, flag in enumerate(rec.attributes):
                    if flag:
                        truth["diagnosis"].append(EvalEntry(image_id, box, a))
    return preds, truth


def label_name(axis: str, label: int) -> str:
    if axis == "enumeration":
        return str(fdi_from_index(label).code())
    if axis == "quadrant":
        return f"Q{label + 1}"
    return ATTRIBUTE_NAMES[label]


@dataclass
class EvalReport:
    ap_quadrant: float
    ap_diagnosis: float
    ap_enumeration: float
    ap50_quadrant: float
    ap50_diagnosis: float
    ap50_enumeration: float
    per_class: Dict[str, Dict[str, Dict[str, float]]]
    counts: Dict[str, int]
    pr_curves: Dict[str, Dict[str, Tuple[List[float], List[float]]]] = field(default_factory=dict, repr=False)

    def ap(self, axis: str, at50: bool = False) -> float:
        return getattr(self, f"ap50_{axis}" if at50 else f"ap_{axis}")

    def to_dict(self, curves: bool = False) -> dict:
        d = asdict(self)
        if not curves:
            d.pop("pr_curves")
        return d

    def to_json(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def to_text(self, name: str = "model") -> str:
        width = max(len(name), 5)
        lines = [
            f"{'Model':<{width}} | AP-Quadrant | AP-Diagnosis | AP-Enumeration",
            f"{name:<{width}} | {self.ap_quadrant:11.3f} | {self.ap_diagnosis:12.3f} | {self.ap_enumeration:14.3f}",
            f"{'AP50':<{width}} | {self.ap50_quadrant:11.3f} | {self.ap50_diagnosis:12.3f} | {self.ap50_enumeration:14.3f}",
        ]
        return "\n".join(lines) + "\n"

    def write_pr_csv(self, out_dir) -> List[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = []
        for axis, curves in self.pr_curves.items():
            path = out_dir / f"pr_{axis}.csv"
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["axis", "class", "recall", "precision"])
                for label, (rec, prec) in curves.items():
                    for r, p in zip(rec, prec):
                        w.writerow([axis, label, f"{r:.6f}", f"{p:.6f}"])
            paths.append(path)
        return paths


def challenge_report(detections: Mapping[int, Sequence[Detection]], gts: Mapping[int, Sequence[ToothRecord]], cfg: EvalConfig = EvalConfig()) -> EvalReport:
    preds, truth = axis_entries(detections, gts, cfg)
    thresholds = cfg.iou_thresholds
    i50 = thresholds.index(0.5) if 0.5 in thresholds else None
    headline, headline50, per_class, curves = {}, {}, {}, {}
    for axis in AXES:
        table = per_class_ap(preds[axis], truth[axis], thresholds)
        pred_by, gt_by = _group(preds[axis]), _group(truth[axis])
        per_class[axis] = {}
        curves[axis] = {}
        for label, values in table.items():
            name = label_name(axis, label)
            ap50 = float(values[i50]) if i50 is not None else class_ap(pred_by.get(label, []), gt_by[label], 0.5)
            per_class[axis][name] = {"ap": float(values.mean()), "ap50": ap50, "num_gt": len(gt_by[label])}
            rec, prec = pr_curve(match_class(pred_by.get(label, []), gt_by[label], 0.5), len(gt_by[label]))
            curves[axis][name] = (rec.tolist(), prec.tolist())
        rows = per_class[axis].values()
        headline[axis] = float(np.mean([r["ap"] for r in rows])) if table else 0.0
        headline50[axis] = float(np.mean([r["ap50"] for r in rows])) if table else 0.0
    counts = {
        "images": len(set(detections) | set(gts)),
        "detections": sum(len(v) for v in detections.values()),
        "ground_truth": sum(len(v) for v in gts.values()),
        **{f"gt_{a}": len(truth[a]) for a in AXES},
        **{f"pred_{a}": len(preds[a]) for a in AXES},
    }
    return EvalReport(
        headline["quadrant"], headline["diagnosis"], headline["enumeration"],
        headline50["quadrant"], headline50["diagnosis"], headline50["enumeration"],
        per_class, counts, curves,
    )
