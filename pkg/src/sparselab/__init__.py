"""Sparse MLP training, magnitude pruning and loss-landscape probes in NumPy."""

from .net import forward, grad, init_params, loss, loss_and_grad
from .params import Architecture, Layout, ParamVector
from .sparsity import Exclusions, PruningSchedule, SparsityMask, apply_mask, magnitude_mask, target_sparsity

__all__ = [
    "Architecture",
    "Exclusions",
    "Layout",
    "ParamVector",
    "PruningSchedule",
    "SparsityMask",
    "apply_mask",
    "forward",
    "grad",
    "init_params",
    "loss",
    "loss_and_grad",
    "magnitude_mask",
    "target_sparsity",
]
