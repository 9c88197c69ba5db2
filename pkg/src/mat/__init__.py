"""Unified online action detection and anticipation over feature streams.

A compressed long-term / enhanced short-term memory encoder feeds a
circular decoder that alternates cross-attention updates between recent
memory and anticipated future tokens; one shared classifier answers both
"what is happening now" and "what happens in tau seconds" from a single
forward pass per frame.
"""

from .autodiff import Tape, Tensor, backward, finite_diff_gradient, tensor
from .config import DataConfig, ModelConfig, RunConfig, load_config
from .kernels import backend_name
from .model import MATModel

__version__ = "0.1.0"

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "finite_diff_gradient",
    "tensor",
    "DataConfig",
    "ModelConfig",
    "RunConfig",
    "load_config",
    "MATModel",
    "backend_name",
    "__version__",
]
