"""Pulse-from-video transformer with a from-scratch differentiation engine.

Subpackage map:

- ``tensor``: float64 tensors with reverse-mode autodiff
- ``gradcheck``: finite-difference gradient verification
- ``convops``: 3-d and temporal-difference convolutions, pooling, upsampling
- ``model``: the video transformer and its configuration
- ``losses``: temporal / frequency losses and the curriculum schedule
- ``metrics``: heart rate, HRV, and evaluation statistics
- ``synth``: synthetic facial-video surrogate generator
- ``formats``: checkpoint and sample file codecs
- ``train``: Adam, the training loop, and the evaluation protocol
- ``cli``: the ``physformer`` command
"""

from .config import RunConfig
from .losses import ScheduleConfig
from .model import ArchConfig, PhysFormer
from .tensor import Tensor, no_grad

__all__ = ["ArchConfig", "PhysFormer", "RunConfig", "ScheduleConfig", "Tensor", "no_grad"]

__version__ = "0.1.0"
