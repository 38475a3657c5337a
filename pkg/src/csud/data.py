"""Unpaired training data and paired test sets.

The sampler draws clean and rainy patches independently (uniform with
replacement, independent crops and flips), which is what makes the pipeline
genuinely unpaired. Every batch is a pure function of (corpus seed, step
index), so a resumed run replays the exact sample sequence of an
uninterrupted one.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from csud.errors import ConfigurationError, InvalidInputError
from csud.imagecore import load_image

_IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


def _list_images(d: Path) -> list:
    if not d.is_dir():
        raise ConfigurationError(f"not a directory: {d}")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES)
    if not files:
        raise ConfigurationError(f"no images found in {d}")
    return files


class UnpairedCorpus:
    """In-memory unpaired corpus; loads every image once at construction."""

    def __init__(self, clean_paths, rainy_paths, crop: int = 256, seed: int = 0,
                 hflip: bool = True):
        clean_paths = [Path(p) for p in clean_paths]
        rainy_paths = [Path(p) for p in rainy_paths]
        if not clean_paths or not rainy_paths:
            raise ConfigurationError("corpus needs at least one clean and one rainy image")
        if crop < 1:
            raise ConfigurationError(f"crop must be >= 1, got {crop}")
        self.clean_paths = clean_paths
        self.rainy_paths = rainy_paths
        self.clean_images = [load_image(p) for p in clean_paths]
        self.rainy_images = [load_image(p) for p in rainy_paths]
        self.crop = crop
        self.seed = seed
        self.hflip = hflip
        # the step the next stateful sample call will use; resume sets this
        self.next_step = 0

    @classmethod
    def from_dirs(cls, clean_dir, rainy_dir, crop: int = 256, seed: int = 0,
                  hflip: bool = True) -> "UnpairedCorpus":
        return cls(
            _list_images(Path(clean_dir)),
            _list_images(Path(rainy_dir)),
            crop=crop,
            seed=seed,
            hflip=hflip,
        )


def _padded_to(img: np.ndarray, crop: int) -> np.ndarray:
    """Reflect-pad spatial dims up to at least `crop`."""
    _, h, w = img.shape
    pad_h = max(crop - h, 0)
    pad_w = max(crop - w, 0)
    if pad_h == 0 and pad_w == 0:
        return img
    if pad_h > h - 1 or pad_w > w - 1:
        raise ConfigurationError(
            f"image {(h, w)} too small to reflect-pad to crop {crop}"
        )
    return np.pad(img, ((0, 0), (0, pad_h), (0, pad_w)), mode="reflect")


def _draw_patch(images, crop: int, hflip: bool, rng: np.random.Generator) -> np.ndarray:
    idx = int(rng.integers(len(images)))
    img = _padded_to(images[idx], crop)
    _, h, w = img.shape
    y = int(rng.integers(h - crop + 1))
    x = int(rng.integers(w - crop + 1))
    patch = img[:, y : y + crop, x : x + crop]
    if hflip and rng.random() < 0.5:
        patch = patch[:, :, ::-1]
    return np.ascontiguousarray(patch)


def sample_unpaired_batch(corpus: UnpairedCorpus, batch_size: int, step=None):
    """One training batch: (clean, rainy) float32 tensors of shape (N,3,c,c).

    The batch is fully determined by (corpus.seed, step); omitting `step`
    uses and advances the corpus's own counter.
    """
    if batch_size < 1:
        raise InvalidInputError(f"batch_size must be >= 1, got {batch_size}")
    if step is None:
        step = corpus.next_step
    corpus.next_step = step + 1
    rng = np.random.default_rng([corpus.seed, step])
    clean = [
        _draw_patch(corpus.clean_images, corpus.crop, corpus.hflip, rng)
        for _ in range(batch_size)
    ]
    rainy = [
        _draw_patch(corpus.rainy_images, corpus.crop, corpus.hflip, rng)
        for _ in range(batch_size)
    ]
    return (
        torch.from_numpy(np.stack(clean)).float(),
        torch.from_numpy(np.stack(rainy)).float(),
    )


@dataclass
class PairedTestSet:
    """Filename-aligned (rainy, gt) pairs, loaded eagerly at full resolution."""

    names: list
    rainy: list
    gt: list

    def __len__(self) -> int:
        return len(self.names)

    def __iter__(self):
        return iter(zip(self.names, self.rainy, self.gt))


def load_paired_testset(root) -> PairedTestSet:
    """Load a paired test split laid out as root/rainy/ and root/gt/."""
    root = Path(root)
    rainy_dir, gt_dir = root / "rainy", root / "gt"
    for d in (rainy_dir, gt_dir):
        if not d.is_dir():
            raise ConfigurationError(f"paired test set is missing {d}")
    rainy_names = {p.name for p in rainy_dir.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES}
    gt_names = {p.name for p in gt_dir.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES}
    orphans = sorted(rainy_names ^ gt_names)
    if orphans:
        raise ConfigurationError(
            f"unpaired file(s) in {root}: {', '.join(orphans)}"
        )
    if not rainy_names:
        raise ConfigurationError(f"no image pairs found under {root}")

    names = sorted(rainy_names)
    rainy, gt = [], []
    for name in names:
        r = load_image(rainy_dir / name)
        g = load_image(gt_dir / name)
        if r.shape != g.shape:
            raise InvalidInputError(
                f"pair {name}: rainy {r.shape[1:]} vs gt {g.shape[1:]} size mismatch"
            )
        rainy.append(r)
        gt.append(g)
    return PairedTestSet(names=names, rainy=rainy, gt=gt)
