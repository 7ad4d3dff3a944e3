"""Reward-driven fine-tuning of a toy conditional diffusion model.

The package fine-tunes the text/conditioning encoder (and optionally the
denoiser) of a small fully-deterministic diffusion model by differentiating
analytic reward functions through the entire iterative denoising chain.
"""

__version__ = "0.1.0"
