"""Desk-scale unlearning experiment harness."""

from .data import Dataset, gen_dataset, split_forget
from .experiment import (
    EvalReport,
    ExperimentConfig,
    ExperimentReport,
    FinetuneGrid,
    evaluate,
    finetune_pool,
    mia_efficacy,
    run_experiment,
    run_single_seed,
)
from .mlp import MlpConfig, TrainHyper, accuracy, loss_and_grads, sample_losses, train

__all__ = [
    "Dataset", "gen_dataset", "split_forget",
    "EvalReport", "ExperimentConfig", "ExperimentReport", "FinetuneGrid",
    "evaluate", "finetune_pool", "mia_efficacy", "run_experiment", "run_single_seed",
    "MlpConfig", "TrainHyper", "accuracy", "loss_and_grads", "sample_losses", "train",
]
