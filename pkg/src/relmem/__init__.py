"""Relational memory core: attention between memory slots inside an LSTM-style recurrent cell."""

from .attention import AttentionParams, AttentionTrace, attend_blocks, mhdpa_over_memory, scaled_dot_attention
from .rmc import RmcConfig, RmcParams, RmcState, init_state, param_count, rmc_step, unroll
from .tensor import ContractError, DimensionError, Tape, Tensor, backward, finite_diff_grad
from .trainer import TrainConfig, evaluate, grad_check_model, train

__all__ = [
    "AttentionParams", "AttentionTrace", "attend_blocks", "mhdpa_over_memory", "scaled_dot_attention",
    "RmcConfig", "RmcParams", "RmcState", "init_state", "param_count", "rmc_step", "unroll",
    "ContractError", "DimensionError", "Tape", "Tensor", "backward", "finite_diff_grad",
    "TrainConfig", "evaluate", "grad_check_model", "train",
]
__version__ = "0.1.0"
