"""FEDF: synchronous federated training with goodness-based pilot selection
and 2-bit ternary parameter-evolution messages."""

from .coordination import MasterConfig, goodness, run_master, select_pilot, update_global
from .data import DataShard, SplitSpec, generate_synthetic, split
from .experiment import CommModel, comm_fedf, comm_phong, comm_terngrad, run_centralized, run_experiment
from .model import ModelSpec, TrainingConfig, gradient, init_parameters, loss, train_local
from .ternary import pack, ternary_first_epoch, ternary_subsequent, unpack

__version__ = "0.1.0"

__all__ = [
    "CommModel", "DataShard", "MasterConfig", "ModelSpec", "SplitSpec", "TrainingConfig",
    "comm_fedf", "comm_phong", "comm_terngrad", "generate_synthetic", "goodness", "gradient",
    "init_parameters", "loss", "pack", "run_centralized", "run_experiment", "run_master",
    "select_pilot", "split", "ternary_first_epoch", "ternary_subsequent", "train_local",
    "unpack", "update_global",
]
