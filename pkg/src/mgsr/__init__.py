"""Toy conditional diffusion super-resolver with gated multimodal conditioning."""

__version__ = "0.1.0"

from .tensor import Tensor, Rng, grad_check  # noqa: F401
