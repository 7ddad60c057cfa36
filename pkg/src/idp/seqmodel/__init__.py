from .model import (ATTENTION, RECURRENT, SeqHyper, SeqRecModel, TextProjection, bpr_loss, forward,
                    pad_batch, score, user_representations)
from .train import TrainHistory, TrainingDiverged, mean_training_loss, pretrain, select_learning_rate, train
from .io import load_model, load_partial, model_tensors, save_model

__all__ = [
    "ATTENTION", "RECURRENT", "SeqHyper", "SeqRecModel", "TextProjection", "bpr_loss", "forward", "pad_batch",
    "score", "user_representations", "TrainHistory", "TrainingDiverged", "mean_training_loss", "pretrain",
    "select_learning_rate", "train", "load_model", "load_partial", "model_tensors", "save_model",
]
