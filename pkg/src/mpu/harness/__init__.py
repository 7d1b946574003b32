"""Synthetic data, checkpoints, metrics and experiment drivers."""

from . import checkpoint, metrics
from .data import Dataset, DatasetSpec, gen_dataset, refusal_sequence
from .experiment import (
    ExperimentConfig,
    ExperimentResult,
    SweepReport,
    loglog_slope,
    output_root,
    pretrain,
    run_context,
    run_experiment,
    sweep,
)

__all__ = [
    "checkpoint", "metrics", "Dataset", "DatasetSpec", "gen_dataset", "refusal_sequence",
    "ExperimentConfig", "ExperimentResult", "SweepReport", "loglog_slope", "output_root",
    "pretrain", "run_context", "run_experiment", "sweep",
]
