"""3D multi-modal contrastive pretraining and lesion segmentation."""

from ._mcl3d import (
    alignment_report,
    cosine_distance,
    dice,
    evaluate_mean_dice,
    generate_cohort,
    info_nce,
    momentum_schedule,
    preprocess_volume,
    run_finetune,
    run_pretraining,
)

__all__ = [
    "alignment_report",
    "cosine_distance",
    "dice",
    "evaluate_mean_dice",
    "generate_cohort",
    "info_nce",
    "momentum_schedule",
    "preprocess_volume",
    "run_finetune",
    "run_pretraining",
]
