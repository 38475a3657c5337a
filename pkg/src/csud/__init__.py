"""Unpaired single-image deraining with channel-consistency supervision.

The package trains a rain-transfer generator and a derainer jointly from
unpaired clean/rainy photos, using the channel consistency prior to keep
transferred rain physically plausible. Submodules:

- imagecore: image currency, channel-cycle residuals, PSNR/SSIM metrics
- rainsynth: procedural rain overlays and the desk-scale dataset builder
- models: rain-transfer generator, patch discriminator, derainer
- losses: channel consistency, self-reconstruction, adversarial, derainer losses
- data: unpaired corpus sampling and paired test-set loading
- trainer: the joint training loop with checkpoints and resume
- evalkit: paired evaluation, CCP verification, generalization and ablation
- cli: the `csud` command-line entry point
"""

from csud.errors import (
    ConfigurationError,
    CsudError,
    DivergenceError,
    ImageIOError,
    InvalidInputError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "CsudError",
    "DivergenceError",
    "ImageIOError",
    "InvalidInputError",
    "__version__",
]
