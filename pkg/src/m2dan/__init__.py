"""Multi-scale multi-target domain-adversarial image classifier.

A from-scratch reverse-mode autodiff core (tensor), convolution / linear /
pooling / gradient-reversal layers, the adversarial training objective
(focal + entropy + domain losses), a synthetic multi-domain wedge benchmark,
an SGD training harness with binary checkpoints, rank-based metrics, and a
batch CLI for the full experiment grid.
"""

from . import errors
from .tensor import Tensor, backward, build_tensor, grad_check, no_grad, reset_tape

__all__ = [
    "Tensor",
    "backward",
    "build_tensor",
    "grad_check",
    "no_grad",
    "reset_tape",
    "errors",
]

__version__ = "0.1.0"
