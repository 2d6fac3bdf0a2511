from .assign import AssignerConfig, AssignmentResult, assign_image, assign_targets
from .loop import TrainConfig, TrainResult, train
from .loss import LossBreakdown, LossWeights, ciou, composite_loss, distribution_focal_loss

__all__ = [
    "AssignerConfig",
    "AssignmentResult",
    "LossBreakdown",
    "LossWeights",
    "TrainConfig",
    "TrainResult",
    "assign_image",
    "assign_targets",
    "ciou",
    "composite_loss",
    "distribution_focal_loss",
    "train",
]
