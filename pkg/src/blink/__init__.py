"""Dynamic visual token resolution for a toy multimodal decoder transformer."""

__version__ = "0.1.0"

from .model import ModelConfig, ToyMLLM
from .resolution import BlinkConfig, run_blink, run_vanilla
from .saliency import PatchGrid, layer_trace
from .tokensr import TokenSRWeights, TrainRecipe, amplify, train_tokensr

__all__ = [
    "ModelConfig",
    "ToyMLLM",
    "BlinkConfig",
    "run_blink",
    "run_vanilla",
    "PatchGrid",
    "layer_trace",
    "TokenSRWeights",
    "TrainRecipe",
    "amplify",
    "train_tokensr",
    "__version__",
]
