"""Desk-scale diffusion editing laboratory.

Analytic Gaussian-mixture "images" stand in for a learned denoiser, so every
editing pipeline (inversion-and-edit, masked guidance, drag optimization,
multi-turn editing) can be run exactly and every stability bound can be checked
numerically.
"""

__version__ = "0.1.0"
