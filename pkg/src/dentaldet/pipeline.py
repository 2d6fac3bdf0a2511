"""Single-shot pipeline runs: predict, post-process and evaluate in one call."""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

from .augment import AugmentConfig
from .core import Detection
from .dataio import DatasetIndex
from .evaluation import EvalConfig, EvalReport, challenge_report
from .network import Detector, ModelConfig, load_checkpoint
from .postprocess import PostConfig, postprocess_image
from .predict import predict_dataset
from .synthetic import make_synthetic_dataset
from .training import AssignerConfig, LossWeights, TrainConfig, train


@dataclass
class PipelineResult:
    detections: Dict[int, List[Detection]]
    report: EvalReport
    seconds: float = 0.0
    checkpoint: Optional[Path] = None

    @property
    def duplicate_fdi(self) -> int:
        """Number of images whose output repeats an assigned FDI."""
        bad = 0
        for dets in self.detections.values():
            codes = [d.assigned_fdi for d in dets]
            bad += len(codes) != len(set(codes))
        return bad


def run_pipeline(model: Detector, dataset: DatasetIndex, post: PostConfig = PostConfig(), eval_cfg: EvalConfig = EvalConfig()) -> PipelineResult:
    """Same result as ``predict | postprocess | evaluate`` on the CLI."""
    raw = predict_dataset(model, dataset, post)
    dets = {k: postprocess_image(v, post) for k, v in raw.items()}
    return PipelineResult(dets, challenge_report(dets, dataset.records, eval_cfg))


# minimal configuration that memorises eight synthetic radiographs in a few CPU minutes
OVERFIT_MODEL = ModelConfig(input_size=256, width_mult=0.25, depth_mult=0.34)
OVERFIT_TRAIN = TrainConfig(epochs=200, batch=8, lr=0.002, optimizer="adamw", warmup_epochs=3, augment=False, seed=0)


def overfit_sanity_run(
    out_dir,
    n_images: int = 8,
    model_cfg: ModelConfig = OVERFIT_MODEL,
    train_cfg: TrainConfig = OVERFIT_TRAIN,
    time_limit: Optional[float] = 540.0,
) -> PipelineResult:
    """Train on a procedural dataset and evaluate on the same images."""
    out = Path(out_dir)
    start = time.perf_counter()
    dataset, _ = make_synthetic_dataset(out / "data", n_images=n_images, seed=0)
    result = train(dataset, model_cfg, train_cfg, out / "run", LossWeights(), AssignerConfig(), AugmentConfig(), time_limit=time_limit)
    model, _ = load_checkpoint(result.checkpoint)
    run = run_pipeline(model, dataset)
    run.seconds = time.perf_counter() - start
    run.checkpoint = result.checkpoint
    return run
