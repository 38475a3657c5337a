"""Procedural rain synthesis for desk-scale training and CCP verification.

Rain is a linear superposition of anti-aliased streaks with a Gaussian
cross-section, added on top of a clean image. The compliant generator adds
one shared streak map to all three channels, so channel-cycle residuals are
preserved exactly before clamping; the violating generator draws an
independent map per channel and serves as a negative control in tests.

Every draw is keyed by (seed, stream, streak index), so outputs are
bit-reproducible and the first n streaks of a field do not change when
num_streaks grows.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from csud.errors import ConfigurationError, InvalidInputError
from csud.imagecore import psnr, load_image, save_image, validate_image

# rng stream ids: shared rain map, per-channel violating maps, clean textures
_STREAM_CCP = 0
_STREAM_VIOLATING = (1, 2, 3)
_STREAM_CLEAN = 4

_IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


def _check_range(name, value, lo_bound=None, hi_bound=None):
    if len(value) != 2:
        raise InvalidInputError(f"{name} must be a (low, high) pair, got {value!r}")
    lo, hi = float(value[0]), float(value[1])
    if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
        raise InvalidInputError(f"{name} must satisfy low <= high, got {value!r}")
    if lo_bound is not None and lo <= lo_bound:
        raise InvalidInputError(f"{name} low end must be > {lo_bound}, got {lo}")
    if hi_bound is not None and hi > hi_bound:
        raise InvalidInputError(f"{name} high end must be <= {hi_bound}, got {hi}")


@dataclass(frozen=True)
class RainParams:
    """Streak-field parameters; all randomness is keyed by `seed`.

    Angles are measured in degrees from vertical, intensity is the additive
    peak amplitude of a single streak in (0, 1].
    """

    num_streaks: int = 40
    length_px: tuple = (8.0, 20.0)
    angle_deg: tuple = (-20.0, 20.0)
    intensity: tuple = (0.12, 0.30)
    thickness_px: float = 1.5
    saturation: float = 0.30
    seed: int = 0

    def __post_init__(self):
        if self.num_streaks < 0:
            raise InvalidInputError(f"num_streaks must be >= 0, got {self.num_streaks}")
        _check_range("length_px", self.length_px, lo_bound=0.0)
        _check_range("angle_deg", self.angle_deg)
        _check_range("intensity", self.intensity, lo_bound=0.0, hi_bound=1.0)
        if not self.thickness_px > 0:
            raise InvalidInputError(f"thickness_px must be > 0, got {self.thickness_px}")
        if not 0.0 < self.saturation <= 1.0:
            raise InvalidInputError(f"saturation must be in (0, 1], got {self.saturation}")
        if self.seed < 0:
            raise InvalidInputError(f"seed must be a non-negative integer, got {self.seed}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RainParams":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown rain parameter(s): {', '.join(unknown)}")
        kwargs = dict(d)
        for key in ("length_px", "angle_deg", "intensity"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


def _add_streak(canvas: np.ndarray, rng: np.random.Generator, params: RainParams) -> None:
    """Accumulate one streak into `canvas` (a float64 (H, W) buffer)."""
    h, w = canvas.shape
    cy = rng.uniform(0.0, h)
    cx = rng.uniform(0.0, w)
    length = rng.uniform(*params.length_px)
    angle = math.radians(rng.uniform(*params.angle_deg))
    amp = rng.uniform(*params.intensity)

    # endpoints of the segment, angle from the vertical (image y) axis
    dy = math.cos(angle) * length / 2.0
    dx = math.sin(angle) * length / 2.0
    y0, y1 = cy - dy, cy + dy
    x0, x1 = cx - dx, cx + dx

    sigma = params.thickness_px / 2.0
    reach = 3.0 * sigma
    lo_y = max(int(math.floor(min(y0, y1) - reach)), 0)
    hi_y = min(int(math.ceil(max(y0, y1) + reach)) + 1, h)
    lo_x = max(int(math.floor(min(x0, x1) - reach)), 0)
    hi_x = min(int(math.ceil(max(x0, x1) + reach)) + 1, w)
    if lo_y >= hi_y or lo_x >= hi_x:
        return

    yy, xx = np.mgrid[lo_y:hi_y, lo_x:hi_x]
    py = yy + 0.5 - y0
    px = xx + 0.5 - x0
    sy, sx = y1 - y0, x1 - x0
    seg_sq = sy * sy + sx * sx
    if seg_sq > 0:
        t = np.clip((py * sy + px * sx) / seg_sq, 0.0, 1.0)
    else:
        t = 0.0
    d_sq = (py - t * sy) ** 2 + (px - t * sx) ** 2

    profile = amp * np.exp(-d_sq / (2.0 * sigma * sigma))
    # truncate to 3 sigma so the streak has compact support
    profile[d_sq > reach * reach] = 0.0
    canvas[lo_y:hi_y, lo_x:hi_x] += profile


def render_rain_map(h: int, w: int, params: RainParams, stream: int = _STREAM_CCP) -> np.ndarray:
    """Render the (H, W) additive streak field for one rng stream.

    Overlapping streaks superpose linearly up to `params.saturation`, which
    caps the field the way bright rain saturates rather than stacking
    without bound.
    """
    if h < 1 or w < 1:
        raise InvalidInputError(f"rain map needs positive dims, got {(h, w)}")
    canvas = np.zeros((h, w), dtype=np.float64)
    for i in range(params.num_streaks):
        rng = np.random.default_rng([params.seed, stream, i])
        _add_streak(canvas, rng, params)
    return np.minimum(canvas, params.saturation).astype(np.float32)


def _check_clean(clean: np.ndarray) -> np.ndarray:
    clean = validate_image(clean, "clean")
    if clean.min() < 0.0 or clean.max() > 1.0:
        raise InvalidInputError(
            f"clean image must lie in [0, 1], got range [{clean.min():.4g}, {clean.max():.4g}]"
        )
    # float64 keeps clean + rain exact, so channel-uniform rain cancels
    # bit-for-bit in cycle residuals (float32 would re-round the sums)
    return clean.astype(np.float64)


def synth_rain_ccp(clean: np.ndarray, params: RainParams, clamp: bool = True) -> np.ndarray:
    """Add one shared streak map to all three channels of `clean`.

    With clamp=False the channel-cycle residuals of the output equal those of
    the clean image exactly; clamping can break that only on the pixels it
    touches.
    """
    clean = _check_clean(clean)
    rain = render_rain_map(clean.shape[1], clean.shape[2], params, stream=_STREAM_CCP)
    rainy = clean + rain[None, :, :].astype(np.float64)
    if clamp:
        rainy = np.clip(rainy, 0.0, 1.0)
    return rainy


def synth_rain_violating(clean: np.ndarray, params: RainParams, clamp: bool = True) -> np.ndarray:
    """Add an independent streak map per channel: breaks channel consistency."""
    clean = _check_clean(clean)
    rainy = clean.copy()
    for c, stream in enumerate(_STREAM_VIOLATING):
        rainy[c] += render_rain_map(clean.shape[1], clean.shape[2], params, stream=stream)
    if clamp:
        rainy = np.clip(rainy, 0.0, 1.0)
    return rainy


def synth_clean(h: int, w: int, seed: int) -> np.ndarray:
    """Procedural rain-free image: a smooth color field plus soft shapes.

    Textured enough for SSIM and patch discriminators to have something to
    look at, while staying inside [0.02, 0.80] so rain overlays rarely clamp.
    """
    rng = np.random.default_rng([seed, _STREAM_CLEAN])

    # low-frequency color field from a coarse random grid
    grid = rng.uniform(0.15, 0.85, size=(1, 3, 4, 4))
    field = F.interpolate(
        torch.from_numpy(grid), size=(h, w), mode="bilinear", align_corners=True
    )[0].numpy()

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy = (yy + 0.5) / h
    xx = (xx + 0.5) / w

    # soft-edged disks and boxes give local structure and gradients
    for _ in range(6):
        color = rng.uniform(0.1, 0.9, size=3)
        cy, cx = rng.uniform(0.1, 0.9, size=2)
        if rng.random() < 0.5:
            radius = rng.uniform(0.06, 0.22)
            dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
            mask = np.clip((radius - dist) / 0.02 + 0.5, 0.0, 1.0)
        else:
            hy = rng.uniform(0.05, 0.2)
            hx = rng.uniform(0.05, 0.2)
            inside = np.maximum(np.abs(yy - cy) - hy, np.abs(xx - cx) - hx)
            mask = np.clip(-inside / 0.02 + 0.5, 0.0, 1.0)
        field = field * (1.0 - mask) + color[:, None, None] * mask

    # mild diagonal shading so flat regions still carry a gradient
    shade = 0.08 * (xx + yy - 1.0)
    field = field + shade

    return np.clip(field, 0.02, 0.80).astype(np.float32)


@dataclass(frozen=True)
class SplitSpec:
    train: int = 40
    test: int = 8

    def __post_init__(self):
        if self.train < 2 or self.test < 1:
            raise ConfigurationError(
                f"split needs train >= 2 and test >= 1, got train={self.train} test={self.test}"
            )


def _sub_seed(seed: int, index: int) -> int:
    """Stable per-image seed derived only from the manifest seed and index."""
    ss = np.random.SeedSequence([seed, index])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _quantized(img: np.ndarray) -> np.ndarray:
    """The array as it will read back after an 8-bit PNG round trip."""
    arr = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    return arr.astype(np.float32) / 255.0


def _list_clean_sources(clean_dir: Path) -> list:
    files = sorted(
        p for p in clean_dir.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES
    )
    if not files:
        raise ConfigurationError(f"no images found in {clean_dir}")
    return files


def make_desk_dataset(
    clean_dir,
    out_dir,
    params: RainParams | None = None,
    split: SplitSpec = SplitSpec(),
    size: tuple = (96, 96),
) -> dict:
    """Write an unpaired train split and a paired test split under `out_dir`.

    Layout: train/clean/ and train/rainy/ come from disjoint clean sources
    (the rainy side never sees the clean side's photos), test/rainy/ and
    test/gt/ are aligned by filename. With clean_dir=None the clean sources
    are procedural images of the given size.

    Returns the manifest, which is also written to out_dir/manifest.json.
    """
    params = params or RainParams()
    out_dir = Path(out_dir)
    n_needed = split.train + split.test

    if clean_dir is None:
        sources = None
    else:
        sources = _list_clean_sources(Path(clean_dir))
        if len(sources) < n_needed:
            raise ConfigurationError(
                f"need at least {n_needed} clean images in {clean_dir}, found {len(sources)}"
            )

    def clean_at(index: int) -> np.ndarray:
        if sources is None:
            return synth_clean(size[0], size[1], seed=_sub_seed(params.seed, index))
        return load_image(sources[index])

    for sub in ("train/clean", "train/rainy", "test/rainy", "test/gt"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)

    files = []
    n_clean_side = split.train // 2

    def record(name, role, sub_seed, index):
        entry = {"name": name, "role": role, "sub_seed": sub_seed}
        if sources is not None:
            entry["source"] = sources[index].name
        files.append(entry)

    for i in range(n_clean_side):
        name = f"{i:04d}.png"
        save_image(clean_at(i), out_dir / "train/clean" / name)
        record(name, "train_clean", _sub_seed(params.seed, i), i)

    for i in range(n_clean_side, split.train):
        name = f"{i:04d}.png"
        sub = _sub_seed(params.seed, i)
        rainy = synth_rain_ccp(clean_at(i), dataclasses.replace(params, seed=sub))
        save_image(rainy, out_dir / "train/rainy" / name)
        record(name, "train_rainy", sub, i)

    psnr_sum = 0.0
    for i in range(split.train, n_needed):
        name = f"{i:04d}.png"
        sub = _sub_seed(params.seed, i)
        clean = clean_at(i)
        rainy = synth_rain_ccp(clean, dataclasses.replace(params, seed=sub))
        save_image(clean, out_dir / "test/gt" / name)
        save_image(rainy, out_dir / "test/rainy" / name)
        record(name, "test_pair", sub, i)
        # account for 8-bit quantization so this matches PSNR on the files
        psnr_sum += psnr(_quantized(rainy), _quantized(clean))

    manifest = {
        "seed": params.seed,
        "params": params.to_dict(),
        "split": {"train": split.train, "test": split.test},
        "mean_rainy_psnr_db": psnr_sum / split.test,
        "files": files,
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest


def load_manifest(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
