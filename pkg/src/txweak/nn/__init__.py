"""Minimal reverse-mode autodiff with the GRU, MLP, loss and optimizers the
classifier needs."""
from .autograd import Tensor, backward, bce, bce_loss, grads
from .layers import GRU, MLP, GRUDirection, PackedLayout, gru_forward, load_params, save_params
from .optim import SGD, AdamW, adamw_step, make_optimizer, sgd_step

__all__ = [
    "Tensor", "backward", "bce", "bce_loss", "grads",
    "GRU", "GRUDirection", "MLP", "PackedLayout", "gru_forward", "load_params", "save_params",
    "SGD", "AdamW", "adamw_step", "sgd_step", "make_optimizer",
]
