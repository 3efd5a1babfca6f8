"""Minimal dense numerical core: autodiff tensors, MLPs, Adam, k-means."""

from .adam import Adam, AdamState, NonFiniteGradient, adam_step
from .gradcheck import finite_diff_check, numeric_grad
from .kmeans import kmeans
from .mlp import Mlp, mlp_forward
from .tensor import Tensor, UnsupportedOperation, as_tensor, grad

__all__ = [
    "Adam",
    "AdamState",
    "Mlp",
    "NonFiniteGradient",
    "Tensor",
    "UnsupportedOperation",
    "adam_step",
    "as_tensor",
    "finite_diff_check",
    "grad",
    "kmeans",
    "mlp_forward",
    "numeric_grad",
]
