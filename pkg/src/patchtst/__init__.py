"""Channel-independent patch Transformer for long-horizon time-series forecasting."""
from .autodiff import Tensor, backward, grad_check, no_grad
from .config import RunConfig, parse_config
from .data import SeriesTable, SplitSpec, SynthSpec, load_csv, prepare_data, synth_generate
from .kernels import BACKEND as KERNEL_BACKEND
from .metrics import Metrics, metric_mse_mae
from .model import ModelConfig, ModelParams, PatchTST
from .training import (TrainConfig, TrainReport, evaluate, finetune_lp_then_ft, linear_probe, pretrain,
                       train, transfer)

__version__ = "0.1.0"

__all__ = [
    "KERNEL_BACKEND", "Metrics", "ModelConfig", "ModelParams", "PatchTST", "RunConfig",
    "SeriesTable", "SplitSpec", "SynthSpec", "Tensor", "TrainConfig", "TrainReport", "backward",
    "grad_check", "load_csv", "metric_mse_mae", "no_grad", "parse_config", "prepare_data",
    "synth_generate", "evaluate", "finetune_lp_then_ft", "linear_probe", "pretrain", "train",
    "transfer",
]
