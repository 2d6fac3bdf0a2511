"""Training loop: SGD with warmup and cosine decay over tier-mixed batches."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch

from ..augment import AugmentConfig, Sample, apply_augmentations
from ..dataio import AnnotationTier, DatasetIndex
from ..errors import EmptyDataset, NonFiniteLoss
from ..imaging import letterbox, load_gray, scale_records
from ..network import Detector, ModelConfig, save_checkpoint
from .assign import AssignerConfig, assign_targets
from .loss import LossWeights, composite_loss

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch: int = 8
    lr: float = 0.01
    lrf: float = 0.01  # final lr as a fraction of lr
    momentum: float = 0.937
    weight_decay: float = 5e-4
    warmup_epochs: float = 3.0
    seed: int = 0
    use_quadrant_tier: bool = True
    optimizer: str = "sgd"
    max_grad_norm: float = 10.0
    augment: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.epochs < 1 or self.batch < 1:
            raise ValueError("epochs and batch must be >= 1")
        if self.optimizer not in ("sgd", "adamw"):
            raise ValueError(f"optimizer must be 'sgd' or 'adamw', got {self.optimizer!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")


@dataclass
class TrainResult:
    checkpoint: Path
    history: List[Dict]  # one entry per step
    seconds: float


def build_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        (decay if p.ndim > 1 else no_decay).append(p)
    groups = [{"params": decay, "weight_decay": cfg.weight_decay}, {"params": no_decay, "weight_decay": 0.0}]
    if cfg.optimizer == "adamw":
        return torch.optim.AdamW(groups, lr=cfg.lr, betas=(cfg.momentum, 0.999))
    return torch.optim.SGD(groups, lr=cfg.lr, momentum=cfg.momentum, nesterov=True)


def learning_rate(step: int, total_steps: int, warmup_steps: int, cfg: TrainConfig) -> float:
    if warmup_steps > 0 and step < warmup_steps:
        return cfg.lr * (step + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    frac = min(max(step - warmup_steps, 0) / span, 1.0)
    return cfg.lr * (cfg.lrf + (1 - cfg.lrf) * 0.5 * (1 + math.cos(math.pi * frac)))


def sample_seed(seed: int, epoch: int, image_id: int) -> int:
    return (seed * 1_000_003 + epoch * 100_003 + image_id) % (2**32)


class TrainingData:
    """In-memory images and records of a dataset, batched in a seed-determined order."""

    def __init__(self, dataset: DatasetIndex, input_size: int, use_quadrant_tier: bool = True):
        self.input_size = input_size
        self.items = []
        for info in dataset.images:
            if info.tier is AnnotationTier.QUADRANT and not use_quadrant_tier:
                continue
            image = load_gray(info.file_path)
            self.items.append(Sample(image, tuple(dataset.records.get(info.image_id, ())), info.tier, info.image_id))
        if not self.items:
            raise EmptyDataset("no trainable images in dataset")

    def __len__(self):
        return len(self.items)

    def batches(self, epoch: int, cfg: TrainConfig, augment: Optional[AugmentConfig]):
        rng = np.random.default_rng(cfg.seed + epoch)
        order = rng.permutation(len(self.items))
        for start in range(0, len(order), cfg.batch):
            yield [self.prepare(self.items[i], epoch, cfg, augment) for i in order[start : start + cfg.batch]]

    def prepare(self, sample: Sample, epoch: int, cfg: TrainConfig, augment: Optional[AugmentConfig]):
        if augment is not None:
            sample = apply_augmentations(sample, augment, sample_seed(cfg.seed, epoch, sample.image_id))
        image, scale = letterbox(sample.image, self.input_size)
        return image, scale_records(sample.records, scale), sample.tier


def collate(batch, dtype) -> Tuple[torch.Tensor, List, List[AnnotationTier]]:
    images = torch.from_numpy(np.stack([b[0] for b in batch])[:, None]).to(dtype)
    return images, [b[1] for b in batch], [b[2] for b in batch]


def train_step(model, optimizer, images, gts, tiers, weights, assigner_cfg, max_grad_norm=None):
    raw = model(images)
    assignments = assign_targets(raw, gts, assigner_cfg)
    loss, parts = composite_loss(raw, assignments, tiers, weights, per_image=True)
    for name, value in loss.terms().items():
        if not torch.isfinite(value):
            raise NonFiniteLoss(name, loss.as_dict())
    optimizer.zero_grad(set_to_none=True)
    loss.total.backward()
    if max_grad_norm:
        torch.nn.utils.clip_grad_norm_(model.parameters(), max_grad_norm)
    optimizer.step()
    return loss, parts


def train(
    dataset: DatasetIndex,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig = TrainConfig(),
    out_dir="runs/train",
    weights: LossWeights = LossWeights(),
    assigner_cfg: AssignerConfig = AssignerConfig(),
    augment_cfg: Optional[AugmentConfig] = AugmentConfig(),
    model: Optional[Detector] = None,
    time_limit: Optional[float] = None,
) -> TrainResult:
    """Train a detector and write ``last.pt`` plus ``train_log.jsonl`` under ``out_dir``.

    ``time_limit`` (seconds) ends training early after the current epoch.
    """
    if len(dataset) == 0:
        raise EmptyDataset("dataset has no images")
    dtype = torch.float64 if train_cfg.dtype == "float64" else torch.float32
    torch.manual_seed(train_cfg.seed)
    if model is None:
        model = Detector(model_cfg)
    model = model.to(dtype)
    data = TrainingData(dataset, model_cfg.input_size, train_cfg.use_quadrant_tier)
    augment = augment_cfg if train_cfg.augment else None

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "last.pt"
    optimizer = build_optimizer(model, train_cfg)
    steps_per_epoch = math.ceil(len(data) / train_cfg.batch)
    total_steps = steps_per_epoch * train_cfg.epochs
    warmup = int(round(train_cfg.warmup_epochs * steps_per_epoch))

    history: List[Dict] = []
    step = 0
    start = time.perf_counter()
    with open(out / "train_log.jsonl", "w") as logf:
        for epoch in range(train_cfg.epochs):
            model.train()
            for batch in data.batches(epoch, train_cfg, augment):
                lr = learning_rate(step, total_steps, warmup, train_cfg)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                images, gts, tiers = collate(batch, dtype)
                loss, parts = train_step(model, optimizer, images, gts, tiers, weights, assigner_cfg, train_cfg.max_grad_norm)
                per_tier: Dict[str, Dict[str, float]] = {}
                for tier, part in zip(tiers, parts):
                    acc = per_tier.setdefault(tier.value, {})
                    for k, v in part.as_dict().items():
                        acc[k] = acc.get(k, 0.0) + v
                entry = {"epoch": epoch, "step": step, "lr": lr, **loss.as_dict(), "masked": loss.masked, "tiers": per_tier}
                logf.write(json.dumps(entry) + "\n")
                history.append(entry)
                step += 1
            logf.flush()
            save_checkpoint(model, ckpt, {"epoch": epoch, "step": step})
            log.info("epoch %d loss %.4f", epoch, history[-1]["total"])
            if time_limit is not None and time.perf_counter() - start > time_limit:
                log.warning("time limit reached after epoch %d", epoch)
                break
    return TrainResult(ckpt, history, time.perf_counter() - start)
