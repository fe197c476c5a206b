"""Approximate dynamic programming with feasible policy improvement."""

from .checkpoint import Checkpoint, CheckpointError, load, save
from .nets import LearnedField, Mlp, TorchPolicy, make_policy_net, make_value_net, mlp_forward
from .trainer import DivergenceError, TrainerConfig, default_sampling_box, train, train_hj_field

__all__ = [
    "Checkpoint", "CheckpointError", "DivergenceError", "LearnedField", "Mlp", "TorchPolicy",
    "TrainerConfig", "default_sampling_box", "load", "make_policy_net", "make_value_net",
    "mlp_forward", "save", "train", "train_hj_field",
]
