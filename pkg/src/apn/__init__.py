"""Adaptive soft-window patching forecaster for irregular multivariate time series."""

from .diff_engine import GradTape, ParamStore, Tensor, backward, finite_difference
from .forecaster import model_forward, mse_loss
from .imts_core import Dataset, ImtsRecord, SynthConfig, batch_records, generate_synthetic, load_dataset
from .tapa import tapa_forward
from .train_harness import TrainConfig, evaluate, grad_check_model, run_ablation, train

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "GradTape",
    "ImtsRecord",
    "ParamStore",
    "SynthConfig",
    "Tensor",
    "TrainConfig",
    "backward",
    "batch_records",
    "evaluate",
    "finite_difference",
    "generate_synthetic",
    "grad_check_model",
    "load_dataset",
    "model_forward",
    "mse_loss",
    "run_ablation",
    "tapa_forward",
    "train",
]
