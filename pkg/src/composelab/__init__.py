"""Desk-scale diffusion lab for compositional text-to-image finetuning."""

__version__ = "0.1.0"
