"""Pixel-space diffusion pre-training toolkit."""
