"""Differentiable SSIM core shared by the metric and the training loss.

Reference convention: 11x11 Gaussian window with sigma=1.5, stability
constants C1=(0.01*peak)^2 and C2=(0.03*peak)^2, window applied in valid
mode (no padding), and the resulting map averaged over space, channels,
and batch.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .errors import InvalidInputError

WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5


def gaussian_window(size: int, sigma: float, dtype, device) -> torch.Tensor:
    """Normalized 2-D Gaussian window of shape (1, 1, size, size)."""
    coords = torch.arange(size, dtype=dtype, device=device) - (size - 1) / 2.0
    g = torch.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    g = g / g.sum()
    window = torch.outer(g, g)
    return window.reshape(1, 1, size, size)


def ssim_index(
    pred: torch.Tensor,
    ref: torch.Tensor,
    window_size: int = WINDOW_SIZE,
    sigma: float = WINDOW_SIGMA,
    peak: float = 1.0,
) -> torch.Tensor:
    """Mean structural similarity between two (B, C, H, W) tensors.

    Returns a 0-dim tensor; gradients flow through both inputs.
    """
    if pred.shape != ref.shape:
        raise InvalidInputError(
            f"ssim requires identical shapes, got {tuple(pred.shape)} vs {tuple(ref.shape)}"
        )
    if pred.dim() != 4:
        raise InvalidInputError(f"ssim expects (B, C, H, W) input, got {pred.dim()} dims")
    h, w = pred.shape[-2:]
    if h < window_size or w < window_size:
        raise InvalidInputError(
            f"image {h}x{w} is smaller than the {window_size}x{window_size} ssim window"
        )

    channels = pred.shape[1]
    window = gaussian_window(window_size, sigma, pred.dtype, pred.device)
    window = window.expand(channels, 1, window_size, window_size)

    def filt(t):
        return F.conv2d(t, window, groups=channels)

    mu1 = filt(pred)
    mu2 = filt(ref)
    mu1_sq = mu1 * mu1
    mu2_sq = mu2 * mu2
    mu12 = mu1 * mu2
    sigma1_sq = filt(pred * pred) - mu1_sq
    sigma2_sq = filt(ref * ref) - mu2_sq
    sigma12 = filt(pred * ref) - mu12

    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    ssim_map = ((2.0 * mu12 + c1) * (2.0 * sigma12 + c2)) / (
        (mu1_sq + mu2_sq + c1) * (sigma1_sq + sigma2_sq + c2)
    )
    return ssim_map.mean()
