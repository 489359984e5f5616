"""Sparse-learning cycle-consistent image deblurring.

Sparse convolutions and boosted k-winner activations inside CycleGAN-style
generators, trained with cycle, WGAN-GP and perceptual losses.
"""
from .config import ABLATIONS, PRESETS, TrainConfig, load_config, resolve
from .data import ImagePair, apply_blur, generate_synthetic_dataset, load_image, make_psf, save_image
from .estimator import MotionBlur, SparseCycleDeblurrer
from .losses import LossWeights
from .metrics import evaluate, ms_ssim, psnr, ssim
from .networks import NetworkSpec, build_critic, build_generator
from .training import Trainer

__all__ = [
    "ABLATIONS", "PRESETS", "TrainConfig", "load_config", "resolve",
    "ImagePair", "apply_blur", "generate_synthetic_dataset", "load_image", "make_psf", "save_image",
    "MotionBlur", "SparseCycleDeblurrer", "LossWeights",
    "evaluate", "ms_ssim", "psnr", "ssim",
    "NetworkSpec", "build_critic", "build_generator", "Trainer",
]
__version__ = "0.1.0"
