"""Diffusion-based image alignment with a procedural dynamic-scene benchmark.

The package covers the full loop: generating alignment triplets with exact
ground truth (``scene_sim``), a small frozen autoencoder defining the latent
space (``latent_codec``), closed-form diffusion math (``diffusion``), a
conditional denoising UNet (``denoiser``), motion-mask conditioning built from
cross-frame correlation (``motion_mask``), training (``training``), strided
deterministic sampling (``sampling``), and a metrics/baseline evaluation
harness (``evaluation``). ``cli`` ties the stages into batch commands.
"""

__version__ = "0.1.0"

from .diffusion import make_schedule
from .latent_codec import load_codec, train_codec
from .sampling import Aligner
from .scene_sim import GeneratorConfig, make_triplet
from .training import LossConfig, TrainConfig, fit, load_checkpoint

__all__ = [
    "Aligner",
    "GeneratorConfig",
    "LossConfig",
    "TrainConfig",
    "fit",
    "load_checkpoint",
    "load_codec",
    "make_schedule",
    "make_triplet",
    "train_codec",
]
