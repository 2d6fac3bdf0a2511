"""Independent reference implementations used only by the tests."""

import math
from itertools import combinations, permutations

import numpy as np


def brute_force_assignment(cost):
    """Exhaustive minimum over all injections; ties go to the lexicographically smallest pair sequence.

    Returns (total, pairs) with pairs sorted by row.
    """
    c = np.asarray(cost, dtype=np.float64)
    n, m = c.shape
    if n <= m:
        candidates = (tuple(zip(range(n), cols)) for cols in permutations(range(m), n))
    else:
        candidates = (tuple(zip(rows, perm)) for rows in combinations(range(n), m) for perm in permutations(range(m)))
    best = None
    for pairs in candidates:
        pairs = tuple(sorted(pairs))
        key = (math.fsum(c[r, j] for r, j in pairs), pairs)
        if best is None or key < best:
            best = key
    return best


def box_iou_xyxy(a, b):
    """Plain-Python IoU, written independently from the package helper."""
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    ua = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / ua if ua > 0 else 0.0


def step_through_ap(tp_flags, num_gt, points=101):
    """Interpolated AP from a score-sorted TP/FP list, computed one recall point at a time."""
    precisions, recalls = [], []
    tp = fp = 0
    for flag in tp_flags:
        if flag:
            tp += 1
        else:
            fp += 1
        precisions.append(tp / (tp + fp))
        recalls.append(tp / num_gt)
    total = 0.0
    for k in range(points):
        r = k / (points - 1)
        best = 0.0
        for p, rc in zip(precisions, recalls):
            if rc >= r and p > best:
                best = p
        total += best
    return total / points


# ---------------------------------------------------------------- loss terms

def _bce_logits(x, t):
    return np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))


def _softmax(x):
    e = np.exp(x - x.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def _ciou_scalar(p, t, eps=1e-7):
    pw, ph = p[2] - p[0], p[3] - p[1] + eps
    tw, th = t[2] - t[0], t[3] - t[1] + eps
    inter = max(min(p[2], t[2]) - max(p[0], t[0]), 0.0) * max(min(p[3], t[3]) - max(p[1], t[1]), 0.0)
    union = pw * ph + tw * th - inter + eps
    iou = inter / union
    cw = max(p[2], t[2]) - min(p[0], t[0])
    ch = max(p[3], t[3]) - min(p[1], t[1])
    c2 = cw ** 2 + ch ** 2 + eps
    rho2 = ((t[0] + t[2] - p[0] - p[2]) ** 2 + (t[1] + t[3] - p[1] - p[3]) ** 2) / 4
    v = (4 / math.pi ** 2) * (math.atan(tw / th) - math.atan(pw / ph)) ** 2
    alpha = v / (v - iou + (1 + eps))
    return iou - (rho2 / c2 + v * alpha)


def reference_image_loss(dfl, cls, attr, grids, strides, fg, gt_index, scores, gt_boxes, gt_classes, gt_quadrants,
                         gt_attrs, tier, reg_max):
    """Loss terms of one image from numpy arrays, evaluated cell by cell.

    ``dfl`` [N, 4, R+1], ``cls`` [N, 32], ``attr`` [N, 4]; assignment arrays as in the package.
    Returns dict with bbox, class, dfl and a 4-list attr.
    """
    centers, cell_stride = [], []
    for (h, w), s in zip(grids, strides):
        for y in range(h):
            for x in range(w):
                centers.append(((x + 0.5) * s, (y + 0.5) * s))
                cell_stride.append(s)
    centers = np.array(centers)
    cell_stride = np.array(cell_stride, dtype=float)
    norm = max(scores.sum(), 1.0)

    if tier == "quadrant":
        probs = 1.0 / (1.0 + np.exp(-cls))
        quad = np.minimum(probs.reshape(-1, 4, 8).sum(-1), 1.0 - 1e-7)
        quad = np.maximum(quad, 1e-7)
        target = np.zeros_like(quad)
        for c in np.flatnonzero(fg):
            target[c, gt_quadrants[gt_index[c]]] = scores[c]
        # torch clamps log terms at -100
        logq = np.maximum(np.log(quad), -100)
        log1q = np.maximum(np.log(1 - quad), -100)
        loss_cls = -(target * logq + (1 - target) * log1q).sum() / norm
    else:
        target = np.zeros_like(cls)
        for c in np.flatnonzero(fg):
            target[c, gt_classes[gt_index[c]]] = scores[c]
        loss_cls = _bce_logits(cls, target).sum() / norm

    bins = np.arange(reg_max + 1)
    loss_bbox = loss_dfl = 0.0
    for c in np.flatnonzero(fg):
        s = cell_stride[c]
        dist = (_softmax(dfl[c]) * bins).sum(-1) * s
        cx, cy = centers[c]
        pred = (cx - dist[0], cy - dist[1], cx + dist[2], cy + dist[3])
        gt = gt_boxes[gt_index[c]]
        w = scores[c]
        loss_bbox += (1.0 - _ciou_scalar(pred, gt)) * w
        ltrb = np.array([cx - gt[0], cy - gt[1], gt[2] - cx, gt[3] - cy]) / s
        ltrb = np.clip(ltrb, 0.0, reg_max - 0.01)
        side = 0.0
        for k in range(4):
            logp = dfl[c, k] - dfl[c, k].max()
            logp = logp - np.log(np.exp(logp).sum())
            left = int(math.floor(ltrb[k]))
            wl = left + 1 - ltrb[k]
            side += -(logp[left] * wl + logp[left + 1] * (1 - wl))
        loss_dfl += side / 4 * w
    loss_bbox /= norm
    loss_dfl /= norm

    attr_terms = [0.0] * 4
    if tier == "disease":
        cells = np.flatnonzero(fg)
        if cells.size:
            tgt = gt_attrs[gt_index[cells]]
            attr_terms = list(_bce_logits(attr[cells], tgt).mean(0))
    return {"bbox": loss_bbox, "class": loss_cls, "dfl": loss_dfl, "attr": attr_terms}
