"""Video saliency prediction: a numpy autograd engine, the encoder-decoder network,
audio-visual fusion, saliency metrics, data pipeline and training tools."""

from .model import ModelConfig, ViNet, count_parameters, pyramid_shapes
from .tensor import Tensor, no_grad, precision

__all__ = ["ModelConfig", "ViNet", "Tensor", "count_parameters", "no_grad", "precision",
           "pyramid_shapes"]
__version__ = "0.1.0"
