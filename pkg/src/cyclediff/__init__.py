"""Cycle-consistent conditional diffusion on synthetic phantom images."""

__version__ = "0.1.0"
