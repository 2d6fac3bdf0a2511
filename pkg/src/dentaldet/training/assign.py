"""Task-aligned target assignment.

For each ground truth, cells whose centre lies strictly inside its box are
candidates. Candidates are ranked by ``p**alpha * iou**beta`` (``p`` is the
predicted probability of the ground-truth class, ``iou`` the overlap of the
cell's decoded box) and the top ``k`` become positives. A cell claimed by
several ground truths goes to the one with the larger metric.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import torch

from ..core import POSITIONS_PER_QUADRANT, ToothRecord, class_index
from ..network import RawPredictions, cell_centers, decode_all

EPS = 1e-9


@dataclass(frozen=True)
class AssignerConfig:
    alpha: float = 0.5
    beta: float = 6.0
    topk: int = 10


@dataclass
class AssignmentResult:
    """Targets for one image over the flattened cells of all levels."""

    fg_mask: torch.Tensor  # [N] bool
    gt_index: torch.Tensor  # [N] long, -1 for background
    target_scores: torch.Tensor  # [N] normalized alignment, 0 on background
    align_metric: torch.Tensor  # [N] raw p^a * iou^b of the winning gt
    gt_boxes: torch.Tensor  # [G, 4]
    gt_classes: torch.Tensor  # [G] FDI class index, -1 when unknown
    gt_quadrants: torch.Tensor  # [G] 0..3
    gt_attributes: torch.Tensor  # [G, 4]
    gt_has_attributes: torch.Tensor  # [G] bool
    level_sizes: Tuple[int, ...] = ()
    positives: List[List[Tuple[int, int, float]]] = field(default_factory=list)  # per gt: (level, cell, metric)

    @property
    def num_gt(self) -> int:
        return int(self.gt_boxes.shape[0])

    @property
    def num_positive(self) -> int:
        return int(self.fg_mask.sum())


def gt_tensors(gts: Sequence[ToothRecord], dtype=torch.float64):
    n = len(gts)
    boxes = torch.tensor([list(r.box.as_tuple()) for r in gts], dtype=dtype).reshape(n, 4)
    classes = torch.tensor([class_index(r.fdi) if r.fdi is not None else -1 for r in gts], dtype=torch.long)
    quads = torch.tensor([r.quadrant - 1 for r in gts], dtype=torch.long)
    attrs = torch.tensor(
        [[float(a) for a in r.attributes] if r.attributes is not None else [0.0] * 4 for r in gts], dtype=dtype
    ).reshape(n, 4)
    has_attrs = torch.tensor([r.attributes is not None for r in gts], dtype=torch.bool)
    return boxes, classes, quads, attrs, has_attrs


def pairwise_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """IoU between [G, 4] and [N, 4] corner boxes -> [G, N]."""
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    area_a = ((a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])).clamp(min=0)
    area_b = ((b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])).clamp(min=0)
    return inter / (area_a[:, None] + area_b[None, :] - inter + EPS)


def quadrant_probs(class_probs: torch.Tensor) -> torch.Tensor:
    """Sum each quadrant's 8 class probabilities, capped just below 1: [..., 32] -> [..., 4]."""
    shape = class_probs.shape[:-1] + (4, POSITIONS_PER_QUADRANT)
    return class_probs.reshape(shape).sum(-1).clamp(max=1.0 - 1e-7)


def alignment_metric(class_probs, pred_boxes, gt_boxes, gt_classes, gt_quadrants, alpha, beta):
    """[G, N] task-alignment metric; quadrant-only ground truths use marginal quadrant probability."""
    g = gt_boxes.shape[0]
    quad = quadrant_probs(class_probs)  # [N, 4]
    p = torch.empty(g, class_probs.shape[0], dtype=class_probs.dtype, device=class_probs.device)
    for i in range(g):
        c = int(gt_classes[i])
        p[i] = class_probs[:, c] if c >= 0 else quad[:, int(gt_quadrants[i])]
    iou = pairwise_iou(gt_boxes, pred_boxes)
    return p.clamp(min=0).pow(alpha) * iou.pow(beta), iou


def centers_inside(centers: torch.Tensor, gt_boxes: torch.Tensor) -> torch.Tensor:
    x, y = centers[None, :, 0], centers[None, :, 1]
    return (
        (x > gt_boxes[:, None, 0] + EPS)
        & (x < gt_boxes[:, None, 2] - EPS)
        & (y > gt_boxes[:, None, 1] + EPS)
        & (y < gt_boxes[:, None, 3] - EPS)
    )


@torch.no_grad()
def assign_image(class_probs, pred_boxes, centers, gts, cfg: AssignerConfig, level_sizes=()) -> AssignmentResult:
    """Assign one image given flattened per-cell class probabilities [N, 32] and boxes [N, 4]."""
    n = class_probs.shape[0]
    dtype = class_probs.dtype
    boxes, classes, quads, attrs, has_attrs = gt_tensors(gts, dtype=dtype)
    g = len(gts)
    fg = torch.zeros(n, dtype=torch.bool)
    gt_index = torch.full((n,), -1, dtype=torch.long)
    scores = torch.zeros(n, dtype=dtype)
    metric_out = torch.zeros(n, dtype=dtype)
    positives: List[List[Tuple[int, int, float]]] = [[] for _ in range(g)]
    if g == 0:
        return AssignmentResult(fg, gt_index, scores, metric_out, boxes, classes, quads, attrs, has_attrs, tuple(level_sizes), positives)

    metric, iou = alignment_metric(class_probs, pred_boxes, boxes, classes, quads, cfg.alpha, cfg.beta)
    cand = centers_inside(centers, boxes)
    metric = torch.where(cand, metric, torch.full_like(metric, -1.0))

    selected = torch.zeros(g, n, dtype=torch.bool)
    for i in range(g):
        idx = torch.nonzero(cand[i]).flatten()
        if idx.numel() == 0:
            continue
        vals = metric[i, idx]
        # descending metric, ties to the lower cell index
        order = sorted(range(idx.numel()), key=lambda j: (-float(vals[j]), int(idx[j])))
        selected[i, idx[order[: cfg.topk]]] = True

    masked = torch.where(selected, metric, torch.full_like(metric, -1.0))
    best_metric, best_gt = masked.max(0)  # max returns the first maximal index -> lower gt wins ties
    fg = selected.any(0)

    # a ground truth that lost every selected cell takes back its best one if the owner can spare it
    owner = torch.where(fg, best_gt, torch.full_like(best_gt, -1))
    for i in range(g):
        if (owner == i).any() or not selected[i].any():
            continue
        for cell in sorted(torch.nonzero(selected[i]).flatten().tolist(), key=lambda c: (-float(metric[i, c]), c)):
            prev = int(owner[cell])
            if prev >= 0 and int((owner == prev).sum()) > 1:
                owner[cell] = i
                break

    gt_index = owner
    for i in range(g):
        cells = torch.nonzero(gt_index == i).flatten()
        if cells.numel() == 0:
            continue
        m = metric[i, cells].clamp(min=0)
        ov = iou[i, cells]
        scores[cells] = m / (m.max() + EPS) * ov.max()
        metric_out[cells] = m
        positives[i] = [(*_level_of(int(c), level_sizes), float(metric[i, c])) for c in cells]
    fg = gt_index >= 0
    return AssignmentResult(fg, gt_index, scores, metric_out, boxes, classes, quads, attrs, has_attrs, tuple(level_sizes), positives)


def _level_of(cell: int, level_sizes: Sequence[int]) -> Tuple[int, int]:
    offset = 0
    for lvl, size in enumerate(level_sizes):
        if cell < offset + size:
            return lvl, cell - offset
        offset += size
    return 0, cell


def assign_targets(raw: RawPredictions, gts_per_image: Sequence[Sequence[ToothRecord]], cfg: Optional[AssignerConfig] = None) -> List[AssignmentResult]:
    """Assign every image of a batch; ``gts_per_image[b]`` lists image ``b``'s ground truth in input-pixel units."""
    cfg = cfg or AssignerConfig()
    if len(gts_per_image) != raw.batch_size:
        raise ValueError(f"{len(gts_per_image)} ground-truth lists for a batch of {raw.batch_size}")
    with torch.no_grad():
        _, cls, _ = raw.flat()
        probs = cls.detach().sigmoid()
        boxes = decode_all(raw, clip=False).detach()
        centers, _ = cell_centers(raw.grid_sizes(), raw.strides, dtype=probs.dtype)
    sizes = tuple(h * w for h, w in raw.grid_sizes())
    return [assign_image(probs[b], boxes[b], centers, gts_per_image[b], cfg, sizes) for b in range(raw.batch_size)]
