"""Desk-scale low-rank attention adapters.

Parallel per-projection adapters and a shared serial input transform
over a small multi-head attention encoder, with exact merge rules,
reverse-mode autodiff, deterministic training and singular-value
diagnostics. See the README for the CLI walkthrough.
"""

__version__ = "0.1.0"

from .adapter import (
    PARALLEL,
    SERIAL,
    AdapterSet,
    LowRankPair,
    init_adapter,
    lora_delta,
    merge_parallel,
    merge_serial,
    param_count,
    serial_transform,
)
from .attention import (
    EncoderStack,
    MhaWeights,
    attach_adapters,
    encoder_forward,
    fold_adapters,
    mha_forward,
    random_stack,
    softmax_rows,
)
from .autograd import GradientMap, Tape, backward, grad_check
from .linalg import (
    Matrix,
    Rng,
    SvdConvergenceError,
    SvdResult,
    effective_rank,
    gaussian_matrix,
    matmul,
    svd,
)
from .mtx import MtxFormatError, read_mtx, write_mtx
from .tasks import Dataset, gen_classification, gen_teacher_student, load_dataset, save_dataset
from .trainer import TrainConfig, TrainHistory, TrainingDivergedError, make_param_groups, train

__all__ = [
    "AdapterSet",
    "Dataset",
    "EncoderStack",
    "GradientMap",
    "LowRankPair",
    "Matrix",
    "MhaWeights",
    "MtxFormatError",
    "PARALLEL",
    "Rng",
    "SERIAL",
    "SvdConvergenceError",
    "SvdResult",
    "Tape",
    "TrainConfig",
    "TrainHistory",
    "TrainingDivergedError",
    "attach_adapters",
    "backward",
    "effective_rank",
    "encoder_forward",
    "fold_adapters",
    "gaussian_matrix",
    "gen_classification",
    "gen_teacher_student",
    "grad_check",
    "init_adapter",
    "load_dataset",
    "lora_delta",
    "make_param_groups",
    "matmul",
    "merge_parallel",
    "merge_serial",
    "mha_forward",
    "param_count",
    "random_stack",
    "read_mtx",
    "save_dataset",
    "serial_transform",
    "softmax_rows",
    "svd",
    "train",
    "write_mtx",
]
