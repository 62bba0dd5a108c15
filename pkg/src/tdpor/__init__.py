"""Temporal diffusion policy optimisation with critic neuron resets, on toy 2-D diffusion models."""

__version__ = "0.1.0"
