"""Trainable encoder, regression head, losses and optimizers."""

from .autograd import Tensor, no_grad

__all__ = ["Tensor", "no_grad"]
