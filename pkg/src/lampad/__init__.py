"""Unsupervised anomaly detection with amplified reconstruction losses.

Train small convolutional autoencoders on anomaly-free images, optionally
amplifying the reconstruction loss (normalize the per-element loss map to
[0, 1-eps], then apply -log(1 - x)), score test samples by plain mean
squared reconstruction error, evaluate with rank-based AUROC, and probe
loss-landscape sharpness along filter-normalized random directions.
"""

from .data import ADTask, ImageBatch, load_idx, load_mvtec_category, make_one_class_task
from .evaluation import EvalReport, anomaly_score, auroc, evaluate_task
from .landscape import (
    LandscapeGrid,
    encoder_probe_train,
    loss_grid,
    random_direction,
    sharpness_index,
)
from .losses import LampConfig, base_loss, cross_entropy, lamp_loss, scale_loss_map
from .model import AEConfig, AEModel, build_autoencoder, load_model, save_model
from .optim import OptimizerConfig, TrainConfig, TrainHistory, train
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = [
    "ADTask",
    "AEConfig",
    "AEModel",
    "EvalReport",
    "ImageBatch",
    "LampConfig",
    "LandscapeGrid",
    "OptimizerConfig",
    "Tensor",
    "TrainConfig",
    "TrainHistory",
    "anomaly_score",
    "auroc",
    "backward",
    "base_loss",
    "build_autoencoder",
    "cross_entropy",
    "encoder_probe_train",
    "evaluate_task",
    "lamp_loss",
    "load_idx",
    "load_model",
    "load_mvtec_category",
    "loss_grid",
    "make_one_class_task",
    "no_grad",
    "random_direction",
    "save_model",
    "scale_loss_map",
    "sharpness_index",
    "train",
]
