"""Detection post-processing: confidence filter, NMS and one-tooth-per-FDI relabelling."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import List, Sequence

import numpy as np

from .core import NUM_CLASSES, Detection, fdi_from_index
from .lsa import Matching, solve_assignment


@dataclass(frozen=True)
class PostConfig:
    iou_thr: float = 0.7
    conf_thr: float = 0.25
    cost: str = "one_minus_p"
    assignment: bool = True
    max_candidates: int = 1000

    def __post_init__(self):
        if self.cost not in ("one_minus_p", "neg_log"):
            raise ValueError(f"post.cost must be 'one_minus_p' or 'neg_log', got {self.cost!r}")
        if not (0.0 <= self.iou_thr <= 1.0 and 0.0 <= self.conf_thr <= 1.0):
            raise ValueError("post thresholds must lie in [0, 1]")


def _boxes(dets: Sequence[Detection]) -> np.ndarray:
    return np.array([d.box.as_tuple() for d in dets], dtype=np.float64).reshape(-1, 4)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def nms(dets: Sequence[Detection], iou_thr: float = 0.7, conf_thr: float = 0.25) -> List[Detection]:
    """Class-agnostic greedy suppression; returns survivors by descending confidence."""
    kept = [d for d in dets if d.confidence >= conf_thr]
    order = sorted(range(len(kept)), key=lambda i: (-kept[i].confidence, i))
    kept = [kept[i] for i in order]
    if not kept:
        return []
    iou = iou_matrix(_boxes(kept), _boxes(kept))
    alive = np.ones(len(kept), dtype=bool)
    out = []
    for i in range(len(kept)):
        if not alive[i]:
            continue
        out.append(kept[i])
        alive &= ~(iou[i] > iou_thr)
    return out


def cost_matrix(dets: Sequence[Detection], kind: str = "one_minus_p") -> np.ndarray:
    """Rows are detections, columns the 32 FDI classes."""
    probs = np.array([d.class_probs for d in dets], dtype=np.float64).reshape(-1, NUM_CLASSES)
    if kind == "neg_log":
        return -np.log(np.clip(probs, 1e-12, 1.0))
    return 1.0 - probs


def correct_enumeration(dets: Sequence[Detection], cost: str = "one_minus_p") -> List[Detection]:
    """Relabel detections so every FDI is used at most once.

    Input order is preserved. With more than 32 detections the unmatched ones
    are dropped; otherwise every detection is kept.
    """
    if not dets:
        return []
    matching: Matching = solve_assignment(cost_matrix(dets, cost))
    col = dict(matching.pairs)
    return [replace(d, assigned_fdi=fdi_from_index(col[i])) for i, d in enumerate(dets) if i in col]


def label_by_argmax(dets: Sequence[Detection]) -> List[Detection]:
    """Assign each detection its own argmax class (the post-process-off baseline)."""
    return [replace(d, assigned_fdi=d.argmax_fdi()) for d in dets]


def postprocess_image(dets: Sequence[Detection], cfg: PostConfig = PostConfig()) -> List[Detection]:
    filtered = nms(dets, cfg.iou_thr, cfg.conf_thr)
    if cfg.assignment:
        return correct_enumeration(filtered, cfg.cost)
    return label_by_argmax(filtered)
