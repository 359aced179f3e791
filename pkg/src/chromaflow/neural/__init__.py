"""Autodiff engine, networks, optimizer and weight persistence."""

from . import autodiff
from .autodiff import Tensor, backward, no_grad
from .nets import (ColorizerNet, FeatureExtractor, RefinerNet, colorize_forward, hypercolumn,
                   image_to_tensor, refine_forward, tensor_to_image)
from .optim import AdamState, adam_step
from .weights import NetworkWeights, load_weights, save_weights

__all__ = [
    "autodiff", "Tensor", "backward", "no_grad",
    "ColorizerNet", "FeatureExtractor", "RefinerNet", "colorize_forward", "hypercolumn",
    "image_to_tensor", "refine_forward", "tensor_to_image",
    "AdamState", "adam_step", "NetworkWeights", "load_weights", "save_weights",
]
