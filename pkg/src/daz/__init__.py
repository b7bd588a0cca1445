"""Diffusion at absolute zero: proximal Langevin sampling with a decreasing Moreau schedule."""

__version__ = "0.1.0"
