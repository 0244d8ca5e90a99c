from .model import (
    EIModel, LossBreakdown, LossWeights, ModalityPrior, UnimodalModel, aux_cls, class_scores,
    compute_losses, forward, generate_int_tokens, int_adapter, late_fusion, new_unimodal,
    primary_features, primary_sequence,
)
from .train import (
    CyclicLR, EpochStats, FitResult, SGD, TrainConfig, compute_modality_prior, evaluate_model, fit,
    predict, pretrain_unimodal, train_epoch,
)

__all__ = [
    "CyclicLR", "EIModel", "EpochStats", "FitResult", "LossBreakdown", "LossWeights",
    "ModalityPrior", "SGD", "TrainConfig", "UnimodalModel", "aux_cls", "class_scores",
    "compute_losses", "compute_modality_prior", "evaluate_model", "fit", "forward",
    "generate_int_tokens", "int_adapter", "late_fusion", "new_unimodal", "predict",
    "pretrain_unimodal", "primary_features", "primary_sequence", "train_epoch",
]
