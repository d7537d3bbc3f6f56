"""Generative-replay continual learning with a prototype-conditioned diffusion model."""

__version__ = "0.1.0"
