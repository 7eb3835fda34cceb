"""Frequency-regularized, registration-corrected adversarial image translation.

Training and evaluation framework for misalignment-robust image-to-image
translation with optional K-space (frequency-domain) loss regularization
and deformable-registration correction, plus a synthetic desk-scale
verification harness and image quality metrics.
"""

__version__ = "0.1.0"

from freqreg.adversarial import (
    LossWeights,
    NetworkBundle,
    TrainingMode,
    discriminator_objective,
    generator_objective,
)
from freqreg.kspace import build_radial_mask, centered_dft_magnitude, frequency_loss
from freqreg.registration import correction_loss, resample, smoothness_loss

__all__ = [
    "LossWeights",
    "NetworkBundle",
    "TrainingMode",
    "build_radial_mask",
    "centered_dft_magnitude",
    "correction_loss",
    "discriminator_objective",
    "frequency_loss",
    "generator_objective",
    "resample",
    "smoothness_loss",
]
