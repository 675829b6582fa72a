"""Graph collaborative learning for disease detection (CLDD)."""

from .graph import InteractionMatrix, SparseMatrix, build_adjacency, normalize, spmm
from .model import ModelConfig, ModelState, PropagationGraph, forward, init_state
from .training import TrainConfig, fit

__all__ = [
    "InteractionMatrix",
    "ModelConfig",
    "ModelState",
    "PropagationGraph",
    "SparseMatrix",
    "TrainConfig",
    "build_adjacency",
    "fit",
    "forward",
    "init_state",
    "normalize",
    "spmm",
]
__version__ = "0.1.0"
