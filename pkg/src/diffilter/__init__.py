"""Diffusion-based multichannel speech enhancement front-end for speaker verification."""

__version__ = "0.1.0"
