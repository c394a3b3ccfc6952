"""Attention-coupled diffusion planning for offline multi-agent control."""

__version__ = "0.1.0"
