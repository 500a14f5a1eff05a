"""Synthetic data, training loops, rollouts and reports."""
from emkit.harness.data import (
    Dataset,
    FieldSnapshot,
    NormStats,
    SyntheticSystem,
    generate_dataset,
    load_dataset,
    save_dataset,
)
from emkit.harness.optim import AdamW, cosine_lr
from emkit.harness.report import rows_from_runs, to_csv, to_markdown, write_report
from emkit.harness.rollout import RolloutResult, persistence, rollout
from emkit.harness.train import (
    Forecaster,
    TrainConfig,
    TrainResult,
    finetune,
    heldout_rmse,
    load_forecaster,
    pretrain,
    save_forecaster,
)

__all__ = [
    "AdamW",
    "Dataset",
    "FieldSnapshot",
    "Forecaster",
    "NormStats",
    "RolloutResult",
    "SyntheticSystem",
    "TrainConfig",
    "TrainResult",
    "cosine_lr",
    "finetune",
    "generate_dataset",
    "heldout_rmse",
    "load_dataset",
    "load_forecaster",
    "persistence",
    "pretrain",
    "rollout",
    "rows_from_runs",
    "save_dataset",
    "save_forecaster",
    "to_csv",
    "to_markdown",
    "write_report",
]
