"""Gradient inversion attacks on federated DDPM training, at desk scale."""

__version__ = "0.1.0"
