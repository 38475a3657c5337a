"""Image tensors, channel-cycle arithmetic, and reference quality metrics.

The package-wide image currency is a numpy float array of shape (3, H, W),
RGB channel order, values in [0, 1]. Every function here is pure, so the
module is safe under any amount of concurrency.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ._ssim import WINDOW_SIZE, ssim_index
from .errors import ImageIOError, InvalidInputError

PSNR_CAP_DB = 100.0


class ZeroNormWarning(RuntimeWarning):
    """Raised (as a warning) when cosine_similarity sees a zero-norm vector."""


@dataclass(frozen=True)
class ChannelCycleResiduals:
    """The three cycle subtractions R-G, G-B, B-R of an RGB image.

    The maps sum to zero elementwise by construction.
    """

    rg: np.ndarray
    gb: np.ndarray
    br: np.ndarray

    def stacked(self) -> np.ndarray:
        return np.stack([self.rg, self.gb, self.br], axis=0)


@dataclass(frozen=True)
class QualityScore:
    psnr_db: float
    ssim: float


def validate_image(img: np.ndarray, name: str = "image") -> np.ndarray:
    """Check the (3, H, W) / finite / non-empty invariants, returning the array."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise InvalidInputError(
            f"{name} must have shape (3, H, W), got {tuple(img.shape)}"
        )
    if img.shape[1] < 1 or img.shape[2] < 1:
        raise InvalidInputError(f"{name} has an empty spatial dimension {tuple(img.shape)}")
    if not np.isfinite(img).all():
        raise InvalidInputError(f"{name} contains non-finite values")
    return img


def cycle_subtract(img: np.ndarray) -> ChannelCycleResiduals:
    """Cycle subtractions (R-G, G-B, B-R) of a 3-channel image.

    Computed in float64 so that residuals of `x` and of `x + rain` (rain
    added identically to all channels in float64) cancel bit-exactly.
    """
    img = validate_image(img).astype(np.float64)
    r, g, b = img[0], img[1], img[2]
    return ChannelCycleResiduals(rg=r - g, gb=g - b, br=b - r)


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two flat vectors, in [-1, 1].

    A zero-norm input yields 0.0 and a ZeroNormWarning instead of an error,
    so corpus scans over degenerate crops (e.g. black borders) never abort.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size:
        raise InvalidInputError(f"vector lengths differ: {a.size} vs {b.size}")
    norm_a = np.linalg.norm(a)
    norm_b = np.linalg.norm(b)
    if norm_a == 0.0 or norm_b == 0.0:
        warnings.warn("zero-norm vector in cosine_similarity, returning 0.0", ZeroNormWarning)
        return 0.0
    value = float(np.dot(a, b) / (norm_a * norm_b))
    return max(-1.0, min(1.0, value))


def psnr(pred: np.ndarray, ref: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 100 dB for zero MSE.

    Inputs are used as given (no clipping); the peak defaults to 1.0 for
    normalized images.
    """
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise InvalidInputError(
            f"psnr requires identical shapes, got {pred.shape} vs {ref.shape}"
        )
    mse = float(np.mean((pred - ref) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(peak * peak / mse))


def ssim(pred: np.ndarray, ref: np.ndarray, peak: float = 1.0) -> float:
    """Mean structural similarity (Gaussian 11x11, sigma 1.5), channel-averaged.

    Requires spatial dims of at least the window size (11).
    """
    pred = validate_image(pred, "pred")
    ref = validate_image(ref, "ref")
    if pred.shape != ref.shape:
        raise InvalidInputError(
            f"ssim requires identical shapes, got {pred.shape} vs {ref.shape}"
        )
    tp = torch.from_numpy(np.ascontiguousarray(pred, dtype=np.float64)).unsqueeze(0)
    tr = torch.from_numpy(np.ascontiguousarray(ref, dtype=np.float64)).unsqueeze(0)
    return float(ssim_index(tp, tr, peak=peak))


def quality(pred: np.ndarray, ref: np.ndarray) -> QualityScore:
    return QualityScore(psnr_db=psnr(pred, ref), ssim=ssim(pred, ref))


def load_image(path) -> np.ndarray:
    """Decode an 8-bit PNG/JPEG file to a float32 (3, H, W) array in [0, 1].

    Grayscale files are replicated to 3 channels; alpha is discarded.
    """
    from PIL import Image, UnidentifiedImageError

    path = Path(path)
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.uint8)
    except (OSError, UnidentifiedImageError) as exc:
        raise ImageIOError(f"cannot read image {path}: {exc}") from exc
    return np.ascontiguousarray(arr.transpose(2, 0, 1).astype(np.float32) / 255.0)


def save_image(img: np.ndarray, path) -> None:
    """Clamp to [0, 1], quantize with round(v*255), and write an 8-bit PNG."""
    from PIL import Image

    img = validate_image(img)
    path = Path(path)
    arr = np.clip(img, 0.0, 1.0)
    arr = np.round(arr * 255.0).astype(np.uint8).transpose(1, 2, 0)
    try:
        Image.fromarray(arr, mode="RGB").save(path)
    except OSError as exc:
        raise ImageIOError(f"cannot write image {path}: {exc}") from exc


def to_tensor(img: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """(3, H, W) numpy image to a torch tensor of the same layout."""
    return torch.from_numpy(np.ascontiguousarray(img)).to(dtype)


def from_tensor(t: torch.Tensor) -> np.ndarray:
    """Torch (3, H, W) or (1, 3, H, W) tensor back to a float32 numpy image."""
    if t.dim() == 4:
        if t.shape[0] != 1:
            raise InvalidInputError(f"expected a single image, got batch of {t.shape[0]}")
        t = t[0]
    return t.detach().cpu().numpy().astype(np.float32)


SSIM_WINDOW = WINDOW_SIZE
