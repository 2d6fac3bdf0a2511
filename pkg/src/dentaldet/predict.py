"""Inference: letterbox, forward, decode, threshold and NMS."""

from __future__ import annotations

from typing import Dict, List

import numpy as np
import torch

from .core import AttributeVector, BoundingBox, Detection, snap
from .dataio import DatasetIndex
from .imaging import letterbox, load_gray
from .network import Detector, decode_all
from .postprocess import PostConfig, nms


@torch.no_grad()
def predict_image(model: Detector, image: np.ndarray, cfg: PostConfig = PostConfig()) -> List[Detection]:
    """NMS-filtered detections in original image pixels (no enumeration correction)."""
    model.eval()
    height, width = image.shape[:2]
    canvas, scale = letterbox(image, model.cfg.input_size)
    dtype = next(model.parameters()).dtype
    raw = model(torch.from_numpy(canvas)[None, None].to(dtype))
    boxes = decode_all(raw, clip=True)[0].double().numpy() / scale
    _, cls, attr = raw.flat()
    probs = cls[0].sigmoid().double().numpy()
    attrs = attr[0].sigmoid().double().numpy()
    conf = probs.max(1)
    idx = np.flatnonzero(conf >= cfg.conf_thr)
    idx = idx[np.argsort(-conf[idx], kind="stable")][: cfg.max_candidates]
    boxes[:, [0, 2]] = boxes[:, [0, 2]].clip(0, width)
    boxes[:, [1, 3]] = boxes[:, [1, 3]].clip(0, height)
    dets = []
    for i in idx:
        x0, y0, x1, y1 = (snap(v) for v in boxes[i])
        if not (x1 > x0 and y1 > y0):
            continue
        dets.append(
            Detection(
                BoundingBox(float(x0), float(y0), float(x1), float(y1)),
                tuple(float(p) for p in probs[i]),
                AttributeVector(*(float(a) for a in attrs[i])),
                float(conf[i]),
            )
        )
    return nms(dets, cfg.iou_thr, cfg.conf_thr)


def predict_dataset(model: Detector, dataset: DatasetIndex, cfg: PostConfig = PostConfig()) -> Dict[int, List[Detection]]:
    return {info.image_id: predict_image(model, load_gray(info.file_path), cfg) for info in dataset.images}
