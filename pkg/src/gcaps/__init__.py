"""Capsule networks with scaled-distance-agreement routing.

Subpackages: autodiff (differentiable tensors), routing (SDA and RBA),
model (the capsule architecture), metrics (T/D scores, usefulness,
confusion), attacks (FGSM/PGD), trainer (ERM and ERM-under-attack,
checkpoints), feature_gen (activation maximization), data_io (IDX
datasets), cli (experiment runner).
"""

__version__ = "0.1.0"

from .autodiff import Tensor
from .model import CapsNet, ModelConfig, desk_config, full_config, tiny_config
from .routing import rba_route, sda_route

__all__ = [
    "Tensor", "CapsNet", "ModelConfig",
    "desk_config", "full_config", "tiny_config",
    "sda_route", "rba_route",
    "__version__",
]
