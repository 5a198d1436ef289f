"""Desk-scale discrete-diffusion layout generation with a learned corrector."""

__version__ = "0.1.0"
