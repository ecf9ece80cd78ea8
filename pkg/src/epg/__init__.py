"""Evolved policy gradients: an ES outer loop over a learned differentiable loss."""

__version__ = "0.1.0"
