"""Training objectives: channel consistency, self-reconstruction, adversarial.

The generator learns rain transfer under three kinds of pressure. CCLoss
keeps the pseudo-rainy image's channel-cycle residuals pinned to the clean
source, so whatever G adds must be channel-uniform like real rain.
Self-reconstruction (SR) losses force G to behave as an identity on its
content argument whenever the guide carries no rain; the same residual term
trains the derainer through a frozen copy of G, pushing derained guides
toward rain-free inputs. Adversarial terms judge every generated image
against the real rainy domain.

Gradient routing is the delicate part: sr_loss_g detaches the derained
guide (it trains G only), while sr_loss_der calls G through detached
parameters so gradient reaches the derainer through its outputs but never
touches G itself.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from csud._ssim import ssim_index
from csud.errors import ConfigurationError, DivergenceError, InvalidInputError

GAN_MODES = ("lsgan", "bce")


@dataclass(frozen=True)
class LossWeights:
    """lambda1/2/3 weight SSIM, perceptual and SR-Der inside the derainer
    objective; alpha1/alpha2 weight CC and SR-G in the total. The SR-Der
    weight defaults to a tenth of the SR-G weight."""

    lambda1: float = 1.0
    lambda2: float = 0.2
    lambda3: float = 0.5
    alpha1: float = 10.0
    alpha2: float = 5.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if not (isinstance(v, (int, float)) and v >= 0):
                raise ConfigurationError(f"loss weight {f.name} must be >= 0, got {v!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown loss weight(s): {', '.join(unknown)}")
        return cls(**d)


_REPORT_FIELDS = (
    "adv1", "adv2", "adv3", "adv4",
    "cc", "sr_g", "sr_der",
    "l1", "ssim", "perceptual",
    "total_g", "total_d", "total_der",
)


@dataclass
class LossReport:
    adv1: float = 0.0
    adv2: float = 0.0
    adv3: float = 0.0
    adv4: float = 0.0
    cc: float = 0.0
    sr_g: float = 0.0
    sr_der: float = 0.0
    l1: float = 0.0
    ssim: float = 0.0
    perceptual: float = 0.0
    total_g: float = 0.0
    total_d: float = 0.0
    total_der: float = 0.0

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in _REPORT_FIELDS}

    def to_json_line(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "LossReport":
        return cls(**{k: d[k] for k in _REPORT_FIELDS if k in d})

    def nonfinite_keys(self) -> list:
        import math

        return [k for k, v in self.to_dict().items() if not math.isfinite(v)]


def _check_same_shape(a, b, what: str):
    if not (torch.is_tensor(a) and torch.is_tensor(b)):
        raise InvalidInputError(f"{what} expects tensors")
    if a.shape != b.shape:
        raise InvalidInputError(
            f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}"
        )
    if a.shape[-3] != 3:
        raise InvalidInputError(f"{what}: expected 3-channel images, got {a.shape[-3]}")


def _cycle(t):
    r, g, b = t[..., 0, :, :], t[..., 1, :, :], t[..., 2, :, :]
    return r - g, g - b, b - r


def cc_loss(pseudo_rainy: torch.Tensor, clean: torch.Tensor) -> torch.Tensor:
    """Mean L1 distance between the channel-cycle residuals of both images.

    Channel-uniform additions to either argument are invisible, so the loss
    penalizes exactly the non-rain-like part of whatever G added.
    """
    _check_same_shape(pseudo_rainy, clean, "cc_loss")
    total = None
    for p, c in zip(_cycle(pseudo_rainy), _cycle(clean)):
        term = (p - c).abs().mean()
        total = term if total is None else total + term
    return total


def sr_loss_g(G, x: torch.Tensor, y_der: torch.Tensor) -> torch.Tensor:
    """Self-reconstruction for the generator.

    G fed a rain-free guide must return the content unchanged; the derained
    rainy image y_der acts as a second, imperfect rain-free guide and is
    detached so only G trains.
    """
    _check_same_shape(x, y_der, "sr_loss_g")
    y_der = y_der.detach()
    return (G(x, x) - x).abs().mean() + (G(x, y_der) - x).abs().mean()


def _call_frozen(G, content, guide):
    """Run G with all parameters detached: gradient passes through the
    inputs but never reaches G itself."""
    frozen = {k: v.detach() for k, v in G.named_parameters()}
    frozen.update({k: v.detach() for k, v in G.named_buffers()})
    return torch.func.functional_call(G, frozen, (content, guide))


def sr_loss_der(G, x: torch.Tensor, x_der: torch.Tensor, y_der: torch.Tensor) -> torch.Tensor:
    """Self-reconstruction for the derainer, through a frozen generator.

    The cleaner the derained guides x_der and y_der, the closer frozen
    G(x, guide) lands to x; the derainer is trained to make that so.
    """
    _check_same_shape(x, x_der, "sr_loss_der")
    _check_same_shape(x, y_der, "sr_loss_der")
    return (
        (_call_frozen(G, x, x_der) - x).abs().mean()
        + (_call_frozen(G, x, y_der) - x).abs().mean()
    )


def ssim_loss(pred: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    """1 - SSIM, differentiable; inputs (3,H,W) or (N,3,H,W) with H,W >= 11."""
    _check_same_shape(pred, ref, "ssim_loss")
    if pred.dim() == 3:
        pred, ref = pred.unsqueeze(0), ref.unsqueeze(0)
    return 1.0 - ssim_index(pred, ref)


class FixedRandomExtractor(nn.Module):
    """Seed-frozen random conv stack standing in for a pretrained backbone.

    The perceptual term exists to stabilize unsupervised training, which any
    fixed smooth multi-scale feature map provides; this one needs no weights
    on disk and is reproducible from its seed.
    """

    def __init__(self, seed: int = 0, widths=(16, 32, 64)):
        super().__init__()
        rng = torch.Generator().manual_seed(seed)
        convs = []
        c_in = 3
        for w in widths:
            conv = nn.Conv2d(c_in, w, 3, 2, 1)
            with torch.no_grad():
                # variance-preserving scale keeps feature magnitudes sane
                std = (2.0 / (c_in * 9)) ** 0.5
                conv.weight.normal_(0.0, std, generator=rng)
                conv.bias.zero_()
            convs.append(conv)
            c_in = w
        self.convs = nn.ModuleList(convs)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, img) -> list:
        feats = []
        x = img if img.dim() == 4 else img.unsqueeze(0)
        for conv in self.convs:
            x = F.relu(conv(x))
            feats.append(x)
        return feats


class PretrainedVggExtractor(nn.Module):
    """VGG-19 feature taps (relu1_1, relu2_1, relu3_1, relu4_1 by default)."""

    IMAGENET_MEAN = (0.485, 0.456, 0.406)
    IMAGENET_STD = (0.229, 0.224, 0.225)

    def __init__(self, features: nn.Module, taps=(1, 6, 11, 20)):
        super().__init__()
        self.features = features
        self.taps = tuple(taps)
        self.register_buffer("mean", torch.tensor(self.IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(self.IMAGENET_STD).view(1, 3, 1, 1))
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, img) -> list:
        x = img if img.dim() == 4 else img.unsqueeze(0)
        x = (x - self.mean) / self.std
        feats = []
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i in self.taps:
                feats.append(x)
            if i >= max(self.taps):
                break
        return feats


def make_extractor(profile: str = "fixed-random", seed: int = 0, taps=(1, 6, 11, 20)):
    """Build a perceptual feature extractor by profile name.

    "pretrained" needs torchvision plus downloadable VGG-19 weights and
    raises a configuration error when either is missing; "fixed-random"
    always works offline.
    """
    if profile == "fixed-random":
        return FixedRandomExtractor(seed=seed)
    if profile == "pretrained":
        try:
            from torchvision.models import VGG19_Weights, vgg19

            net = vgg19(weights=VGG19_Weights.IMAGENET1K_V1).features.eval()
        except Exception as exc:
            raise ConfigurationError(
                f"pretrained VGG-19 extractor unavailable ({exc}); "
                f"use profile 'fixed-random' for offline runs"
            ) from exc
        return PretrainedVggExtractor(net, taps=taps)
    raise ConfigurationError(
        f"unknown perceptual profile {profile!r}; choose 'pretrained' or 'fixed-random'"
    )


def perceptual_loss(extractor, pred: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    """Sum over taps of mean absolute feature distance."""
    _check_same_shape(pred, ref, "perceptual_loss")
    feats_p = extractor(pred)
    feats_r = extractor(ref)
    if len(feats_p) < 1:
        raise ConfigurationError("extractor produced no feature maps")
    total = None
    for fp, fr in zip(feats_p, feats_r):
        term = (fp - fr).abs().mean()
        total = term if total is None else total + term
    return total


def _check_gan_mode(mode: str):
    if mode not in GAN_MODES:
        raise ConfigurationError(f"unknown gan mode {mode!r}; choose from {GAN_MODES}")


def gan_terms_g(D, fakes, mode: str = "lsgan") -> list:
    """Per-fake generator-side adversarial terms (one scalar per fake)."""
    _check_gan_mode(mode)
    if not fakes:
        raise InvalidInputError("fakes list is empty")
    terms = []
    for fake in fakes:
        logits = D(fake)
        if mode == "lsgan":
            terms.append(((logits - 1.0) ** 2).mean())
        else:
            terms.append(F.binary_cross_entropy_with_logits(logits, torch.ones_like(logits)))
    return terms


def gan_loss_g(D, fakes, mode: str = "lsgan") -> torch.Tensor:
    """Mean over fakes of the per-fake adversarial term."""
    terms = gan_terms_g(D, fakes, mode=mode)
    return sum(terms) / len(terms)


def gan_loss_d(D, real: torch.Tensor, fakes, mode: str = "lsgan") -> torch.Tensor:
    """Discriminator objective; fakes are detached inside.

    Least-squares form: half the real term plus half the fake terms'
    average, so a discriminator outputting 1 everywhere scores exactly 0.5.
    """
    _check_gan_mode(mode)
    if not fakes:
        raise InvalidInputError("fakes list is empty")
    real_logits = D(real)
    fake_term = None
    for fake in fakes:
        logits = D(fake.detach())
        if mode == "lsgan":
            term = (logits ** 2).mean()
        else:
            term = F.binary_cross_entropy_with_logits(logits, torch.zeros_like(logits))
        fake_term = term if fake_term is None else fake_term + term
    fake_term = fake_term / len(fakes)
    if mode == "lsgan":
        real_term = ((real_logits - 1.0) ** 2).mean()
    else:
        real_term = F.binary_cross_entropy_with_logits(
            real_logits, torch.ones_like(real_logits)
        )
    return 0.5 * real_term + 0.5 * fake_term


def derainer_loss_terms(x, x_der, extractor, G_frozen, y_der) -> dict:
    """Unweighted components of the derainer objective, keyed by name."""
    return {
        "l1": (x - x_der).abs().mean(),
        "ssim": ssim_loss(x_der, x),
        "perceptual": perceptual_loss(extractor, x_der, x),
        "sr_der": sr_loss_der(G_frozen, x, x_der, y_der),
    }


def derainer_loss(x, x_der, weights: LossWeights, extractor, G_frozen, y_der) -> torch.Tensor:
    t = derainer_loss_terms(x, x_der, extractor, G_frozen, y_der)
    return (
        t["l1"]
        + weights.lambda1 * t["ssim"]
        + weights.lambda2 * t["perceptual"]
        + weights.lambda3 * t["sr_der"]
    )


def _scalar(v) -> float:
    return float(v.detach()) if torch.is_tensor(v) else float(v)


def total_loss(parts: dict, weights: LossWeights):
    """Assemble the full objective from precomputed parts.

    parts: adv (list of 1..4 per-fake generator-side terms), cc, sr_g, and
    the derainer components l1, ssim, perceptual, sr_der; optionally d_loss
    for reporting. Returns (total tensor for the G+Der step, LossReport).
    Raises a divergence error carrying the report if anything is non-finite.
    """
    adv = list(parts["adv"])
    if not 1 <= len(adv) <= 4:
        raise InvalidInputError(f"expected 1..4 adversarial terms, got {len(adv)}")
    gan_g = sum(adv) / len(adv)
    der = (
        parts["l1"]
        + weights.lambda1 * parts["ssim"]
        + weights.lambda2 * parts["perceptual"]
        + weights.lambda3 * parts["sr_der"]
    )
    total = gan_g + der + weights.alpha1 * parts["cc"] + weights.alpha2 * parts["sr_g"]

    adv_named = {f"adv{i + 1}": _scalar(t) for i, t in enumerate(adv)}
    report = LossReport(
        **adv_named,
        cc=_scalar(parts["cc"]),
        sr_g=_scalar(parts["sr_g"]),
        sr_der=_scalar(parts["sr_der"]),
        l1=_scalar(parts["l1"]),
        ssim=_scalar(parts["ssim"]),
        perceptual=_scalar(parts["perceptual"]),
        total_g=_scalar(total),
        total_d=_scalar(parts.get("d_loss", 0.0)),
        total_der=_scalar(der),
    )
    bad = report.nonfinite_keys()
    if bad:
        raise DivergenceError(
            f"non-finite loss component(s): {', '.join(bad)}", report=report
        )
    return total, report
