"""Quantitative evaluation: PSNR/SSIM reports over paired test sets, CCP
residual statistics, cross-dataset generalization matrices, and ablation
comparison runs.

Scores are computed on RGB output clamped to [0, 1] at full resolution with
no border cropping; the report header records that choice along with the
published full-scale reference numbers, which desk-scale runs are not
expected to reproduce.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from csud.data import PairedTestSet, UnpairedCorpus
from csud.errors import ConfigurationError
from csud.imagecore import (
    cosine_similarity,
    cycle_subtract,
    from_tensor,
    psnr,
    ssim,
    to_tensor,
)
from csud.losses import LossWeights
from csud.models import make_derainer
from csud.trainer import TrainConfig, load_checkpoint, train

FULL_SCALE_REFERENCE = {
    "dataset": "Rain100L",
    "psnr_db": 33.28,
    "ssim": 0.954,
    "note": "published full-scale result, recorded for context only",
}

CHANNEL_PAIRS = ("rg", "gb", "br")


def _report_header() -> dict:
    return {
        "metric_surface": "RGB, clamped to [0,1], full resolution",
        "border_crop": "none",
        "full_scale_reference": dict(FULL_SCALE_REFERENCE),
    }


@dataclass
class EvalReport:
    dataset: str
    checkpoint: str
    per_image: list
    psnr_mean_db: float
    ssim_mean: float
    header: dict = field(default_factory=_report_header)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path


def derainer_from_checkpoint(path) -> torch.nn.Module:
    """Rebuild just the derainer network stored in a training checkpoint."""
    payload = load_checkpoint(path)
    config = TrainConfig.from_dict(payload["config"])
    der = make_derainer(config.derainer)
    der.load_state_dict(payload["models"]["derainer"])
    der.eval()
    return der


def derain_image(derainer, rainy: np.ndarray) -> np.ndarray:
    """Run one full-resolution image through the derainer, clamped to [0,1].

    derainer=None scores the identity baseline (the rainy input itself).
    """
    if derainer is None:
        return np.clip(rainy, 0.0, 1.0).astype(np.float32)
    was_training = derainer.training
    derainer.eval()
    try:
        with torch.no_grad():
            out = derainer(to_tensor(rainy).unsqueeze(0)).clamp(0.0, 1.0)
    finally:
        derainer.train(was_training)
    return from_tensor(out)


def evaluate(derainer, testset: PairedTestSet, dataset_name: str = "testset",
             checkpoint_id: str = "identity") -> EvalReport:
    """Score every (rainy, gt) pair and report per-image and mean metrics."""
    if len(testset.names) == 0:
        raise ConfigurationError("cannot evaluate an empty test set")
    per_image = []
    for name, rainy, gt in zip(testset.names, testset.rainy, testset.gt):
        out = derain_image(derainer, rainy)
        per_image.append({
            "name": name,
            "psnr_db": psnr(out, gt),
            "ssim": ssim(out, gt),
        })
    return EvalReport(
        dataset=dataset_name,
        checkpoint=str(checkpoint_id),
        per_image=per_image,
        psnr_mean_db=float(np.mean([r["psnr_db"] for r in per_image])),
        ssim_mean=float(np.mean([r["ssim"] for r in per_image])),
    )


@dataclass
class CCPReport:
    mode: str
    count: int
    pair_means: dict
    per_image: list = field(default_factory=list)

    def min_pair_mean(self) -> float:
        return min(self.pair_means.values())

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path


def ccp_report(clean_set, rainy_set, mode: str = "paired", names=None) -> CCPReport:
    """Cosine similarity between clean and rainy cycle residuals.

    paired (default): one similarity per channel pair per image, then the
    mean over images. corpus: residuals of each side are flattened and
    concatenated across all images before a single cosine per channel pair.
    """
    if mode not in ("paired", "corpus"):
        raise ConfigurationError(f"ccp mode must be 'paired' or 'corpus', got {mode!r}")
    clean_set = list(clean_set)
    rainy_set = list(rainy_set)
    if len(clean_set) != len(rainy_set):
        raise ConfigurationError(
            f"clean and rainy sets must pair up, got {len(clean_set)} vs {len(rainy_set)}"
        )
    if not clean_set:
        raise ConfigurationError("cannot build a CCP report from an empty set")
    if names is None:
        names = [str(i) for i in range(len(clean_set))]

    clean_res = [cycle_subtract(img) for img in clean_set]
    rainy_res = [cycle_subtract(img) for img in rainy_set]

    if mode == "paired":
        per_image = []
        for name, c, r in zip(names, clean_res, rainy_res):
            per_image.append({
                "name": name,
                "rg": cosine_similarity(r.rg, c.rg),
                "gb": cosine_similarity(r.gb, c.gb),
                "br": cosine_similarity(r.br, c.br),
            })
        pair_means = {
            k: float(np.mean([row[k] for row in per_image])) for k in CHANNEL_PAIRS
        }
        return CCPReport(mode=mode, count=len(per_image),
                         pair_means=pair_means, per_image=per_image)

    pair_means = {}
    for k in CHANNEL_PAIRS:
        pooled_clean = np.concatenate([getattr(c, k).ravel() for c in clean_res])
        pooled_rainy = np.concatenate([getattr(r, k).ravel() for r in rainy_res])
        pair_means[k] = cosine_similarity(pooled_rainy, pooled_clean)
    return CCPReport(mode=mode, count=len(clean_set), pair_means=pair_means)


def ccp_plot(report: CCPReport, path) -> Path:
    """Bar chart of the three channel-pair similarities (PNG)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    fig, ax = plt.subplots(figsize=(4, 3))
    pairs = list(CHANNEL_PAIRS)
    values = [report.pair_means[k] for k in pairs]
    ax.bar(pairs, values, color="#4878d0")
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("cosine similarity")
    ax.set_title(f"CCP residual similarity ({report.mode}, n={report.count})")
    for i, v in enumerate(values):
        ax.text(i, v, f"{v:.4f}", ha="center", va="bottom", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def generalization_matrix(checkpoints: dict, testsets: dict, out_dir=None) -> dict:
    """Evaluate every checkpoint on every test set.

    checkpoints: name -> checkpoint path; testsets: name -> PairedTestSet.
    Returns {checkpoint_name: {testset_name: {psnr_db, ssim}}} and, given
    out_dir, writes matrix.json plus a long-form matrix.csv.
    """
    if not checkpoints or not testsets:
        raise ConfigurationError("generalization matrix needs >= 1 checkpoint and >= 1 test set")
    for ck_name, ck_path in checkpoints.items():
        if not Path(ck_path).is_file():
            missing_cells = ", ".join(f"({ck_name}, {ts})" for ts in testsets)
            raise ConfigurationError(
                f"checkpoint for cell(s) {missing_cells} not found: {ck_path}"
            )

    cells = {}
    for ck_name, ck_path in checkpoints.items():
        der = derainer_from_checkpoint(ck_path)
        cells[ck_name] = {}
        for ts_name, testset in testsets.items():
            report = evaluate(der, testset, dataset_name=ts_name, checkpoint_id=ck_name)
            cells[ck_name][ts_name] = {
                "psnr_db": report.psnr_mean_db,
                "ssim": report.ssim_mean,
            }

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "matrix.json").write_text(json.dumps(cells, indent=2) + "\n")
        with open(out_dir / "matrix.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["checkpoint", "testset", "psnr_db", "ssim"])
            for ck_name, row in cells.items():
                for ts_name, cell in row.items():
                    writer.writerow([ck_name, ts_name, cell["psnr_db"], cell["ssim"]])
    return cells


TOGGLE_KEYS = ("cc", "sr", "num_gan_constraints", "weights")


def _as_switch(value, key: str) -> bool:
    if isinstance(value, bool):
        return value
    if value in ("on", "off"):
        return value == "on"
    raise ConfigurationError(f"toggle {key!r} must be on/off or a boolean, got {value!r}")


def apply_toggles(config: TrainConfig, toggles: dict) -> TrainConfig:
    """Derive an ablation variant config from switch settings.

    cc=off zeroes the channel-consistency weight; sr=off zeroes both
    self-reconstruction weights; num_gan_constraints and weights override
    the corresponding config fields.
    """
    unknown = sorted(set(toggles) - set(TOGGLE_KEYS))
    if unknown:
        raise ConfigurationError(
            f"unknown ablation toggle(s): {', '.join(unknown)}; known: {', '.join(TOGGLE_KEYS)}"
        )
    weights = config.weights
    if "weights" in toggles:
        weights = LossWeights.from_dict({**weights.to_dict(), **toggles["weights"]})
    if not _as_switch(toggles.get("cc", True), "cc"):
        weights = dataclasses.replace(weights, alpha1=0.0)
    if not _as_switch(toggles.get("sr", True), "sr"):
        weights = dataclasses.replace(weights, alpha2=0.0, lambda3=0.0)
    return dataclasses.replace(
        config,
        weights=weights,
        num_gan_constraints=toggles.get("num_gan_constraints", config.num_gan_constraints),
    )


def variant_name(toggles: dict) -> str:
    if not toggles:
        return "base"
    parts = []
    for key in TOGGLE_KEYS:
        if key not in toggles:
            continue
        value = toggles[key]
        if key in ("cc", "sr"):
            value = "on" if _as_switch(value, key) else "off"
        elif key == "weights":
            value = "+".join(f"{k}{v}" for k, v in sorted(value.items()))
        parts.append(f"{key}={value}")
    return ",".join(parts)


def ablation_run(base_config: TrainConfig, variants, clean_dir, rainy_dir,
                 testset: PairedTestSet, out_dir) -> list:
    """Train and score each toggle variant on the same seeded corpus.

    Returns rows ranked by mean PSNR (best first), each echoing the variant's
    resolved config; writes ablation.json and ablation.csv under out_dir.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for toggles in variants:
        cfg = apply_toggles(base_config, dict(toggles))
        name = variant_name(dict(toggles))
        corpus = UnpairedCorpus.from_dirs(clean_dir, rainy_dir, crop=cfg.crop, seed=cfg.seed)
        result = train(cfg, corpus, out_dir / name.replace("/", "_"))
        der = derainer_from_checkpoint(result.final_checkpoint)
        report = evaluate(der, testset, dataset_name="ablation-testset", checkpoint_id=name)
        rows.append({
            "name": name,
            "toggles": dict(toggles),
            "psnr_db": report.psnr_mean_db,
            "ssim": report.ssim_mean,
            "steps": result.steps,
            "config": cfg.to_dict(),
        })
    rows.sort(key=lambda r: r["psnr_db"], reverse=True)

    (out_dir / "ablation.json").write_text(json.dumps(rows, indent=2) + "\n")
    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "name", "psnr_db", "ssim"])
        for rank, row in enumerate(rows, start=1):
            writer.writerow([rank, row["name"], row["psnr_db"], row["ssim"]])
    return rows
