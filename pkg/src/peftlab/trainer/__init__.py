from .losses import composite_loss, orth_penalty, s2_basis_term, s2_sparsity_term, total_loss
from .loop import PRETRAIN_DEFAULTS, Adam, DivergenceError, TrainConfig, TrainingRun, evaluate_sets, pretrain, run_training, train
from .metrics import edit_distance, evaluate, token_error_rate
from .tasks import DATA_SIZES, TaskData, TaskSpec, collate, make_task

__all__ = [
    "Adam",
    "DATA_SIZES",
    "DivergenceError",
    "TaskData",
    "TaskSpec",
    "TrainConfig",
    "TrainingRun",
    "collate",
    "composite_loss",
    "edit_distance",
    "evaluate",
    "evaluate_sets",
    "make_task",
    "orth_penalty",
    "pretrain",
    "PRETRAIN_DEFAULTS",
    "run_training",
    "s2_basis_term",
    "s2_sparsity_term",
    "token_error_rate",
    "total_loss",
    "train",
]
