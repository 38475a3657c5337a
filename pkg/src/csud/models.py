"""Networks: rain-transfer generator, patch discriminator, pluggable derainer.

The generator has two input branches. CFEM lifts the clean content image
with a single wide conv; RIEM runs the rainy guide through a small U shape
(two 7x7 convs, a strided downsample, bilinear upsample, fuse conv) to pull
out rain structure. The branches are concatenated and refined by a stack of
residual blocks, ending in an unconstrained 3-channel projection.

The discriminator is a standard patch critic: overlapping 4x4 convs whose
output is a spatial grid of real/fake logits. The derainer is any
image-to-image network registered under a name; the default is a compact
3-scale U-shaped CNN with a global input-to-output skip whose final conv is
zero-initialized, so it starts as an exact identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from csud.errors import ConfigurationError, InvalidInputError


@dataclass(frozen=True)
class GeneratorConfig:
    base_channels: int = 64
    riem_down_channels: int = 128
    num_residual_blocks: int = 6
    trunk_channels: int = 128

    def __post_init__(self):
        if self.num_residual_blocks < 1:
            raise ConfigurationError(
                f"num_residual_blocks must be >= 1, got {self.num_residual_blocks}"
            )
        if self.base_channels < 1 or self.riem_down_channels < 1:
            raise ConfigurationError("channel widths must be >= 1")
        if self.trunk_channels != 2 * self.base_channels:
            raise ConfigurationError(
                "trunk_channels must equal 2 * base_channels: the trunk consumes "
                "the concatenation of the CFEM and RIEM features"
            )


@dataclass(frozen=True)
class DiscriminatorConfig:
    widths: tuple = (64, 128, 256, 512)
    kernel_size: int = 4

    # three stride-2 stages, then two stride-1 layers (pre-logit + logit)
    strides = (2, 2, 2, 1, 1)

    def __post_init__(self):
        if len(self.widths) != 4 or any(w < 1 for w in self.widths):
            raise ConfigurationError(
                f"widths must be four positive layer widths, got {self.widths!r}"
            )
        if self.kernel_size < 2:
            raise ConfigurationError(f"kernel_size must be >= 2, got {self.kernel_size}")

    def map_size(self, n: int) -> int:
        """Closed-form output extent for one spatial dimension of size n."""
        for s in self.strides:
            n = (n + 2 - self.kernel_size) // s + 1
        return n


@dataclass(frozen=True)
class DerainerConfig:
    arch: str = "ushape"
    width: int = 32

    def __post_init__(self):
        if self.width < 1:
            raise ConfigurationError(f"width must be >= 1, got {self.width}")


def _as_batched(t, name: str):
    """Accept (3,H,W) or (N,3,H,W); return a 4-D tensor and a squeeze flag."""
    if not torch.is_tensor(t):
        raise InvalidInputError(f"{name} must be a torch tensor, got {type(t).__name__}")
    if t.dim() == 3:
        t = t.unsqueeze(0)
        squeeze = True
    elif t.dim() == 4:
        squeeze = False
    else:
        raise InvalidInputError(f"{name} must be (3,H,W) or (N,3,H,W), got {tuple(t.shape)}")
    if t.shape[1] != 3:
        raise InvalidInputError(f"{name} must have 3 channels, got {t.shape[1]}")
    return t, squeeze


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, 1, 1)
        self.conv2 = nn.Conv2d(channels, channels, 3, 1, 1)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


class RainTransferGenerator(nn.Module):
    """G(content, guide): re-renders `content` with the rain carried by `guide`."""

    def __init__(self, config: GeneratorConfig = GeneratorConfig()):
        super().__init__()
        self.config = config
        b, d, t = config.base_channels, config.riem_down_channels, config.trunk_channels
        self.cfem = nn.Conv2d(3, b, 7, 1, 3)
        self.riem_conv1 = nn.Conv2d(3, b, 7, 1, 3)
        self.riem_conv2 = nn.Conv2d(b, b, 7, 1, 3)
        self.riem_down = nn.Conv2d(b, d, 4, 2, 1)
        self.riem_up = nn.Conv2d(d, b, 3, 1, 1)
        self.blocks = nn.ModuleList(
            ResidualBlock(t) for _ in range(config.num_residual_blocks)
        )
        self.head = nn.Conv2d(t, 3, 3, 1, 1)

    def forward(self, content, guide):
        content, squeeze = _as_batched(content, "content")
        guide, _ = _as_batched(guide, "guide")
        if content.shape[-2:] != guide.shape[-2:]:
            raise InvalidInputError(
                f"content and guide spatial sizes differ: "
                f"{tuple(content.shape[-2:])} vs {tuple(guide.shape[-2:])}"
            )
        if content.shape[0] != guide.shape[0]:
            raise InvalidInputError(
                f"content and guide batch sizes differ: {content.shape[0]} vs {guide.shape[0]}"
            )
        if min(content.shape[-2:]) < 2:
            raise InvalidInputError(
                f"generator needs spatial dims >= 2, got {tuple(content.shape[-2:])}"
            )

        feat = F.relu(self.cfem(content))

        r = F.relu(self.riem_conv1(guide))
        r = F.relu(self.riem_conv2(r))
        pre_down = r.shape[-2:]
        r = F.relu(self.riem_down(r))
        r = F.interpolate(r, size=pre_down, mode="bilinear", align_corners=False)
        r = F.relu(self.riem_up(r))

        h = torch.cat([feat, r], dim=1)
        for block in self.blocks:
            h = block(h)
        out = self.head(h)
        return out.squeeze(0) if squeeze else out


class PatchDiscriminator(nn.Module):
    """Fully convolutional critic emitting a grid of per-patch logits."""

    MIN_INPUT = 16

    def __init__(self, config: DiscriminatorConfig = DiscriminatorConfig()):
        super().__init__()
        self.config = config
        w, k = config.widths, config.kernel_size
        self.conv1 = nn.Conv2d(3, w[0], k, 2, 1)
        self.conv2 = nn.Conv2d(w[0], w[1], k, 2, 1)
        self.conv3 = nn.Conv2d(w[1], w[2], k, 2, 1)
        self.conv4 = nn.Conv2d(w[2], w[3], k, 1, 1)
        self.out_conv = nn.Conv2d(w[3], 1, k, 1, 1)
        self.norm2 = nn.InstanceNorm2d(w[1])
        self.norm3 = nn.InstanceNorm2d(w[2])
        self.norm4 = nn.InstanceNorm2d(w[3])

    def forward(self, img):
        img, squeeze = _as_batched(img, "image")
        h, w = img.shape[-2:]
        if min(h, w) < self.MIN_INPUT:
            raise InvalidInputError(
                f"discriminator needs spatial dims >= {self.MIN_INPUT}, got {(h, w)}"
            )
        if self.config.map_size(h) < 1 or self.config.map_size(w) < 1:
            raise InvalidInputError(
                f"input {(h, w)} collapses to an empty logit map; smallest "
                f"workable square input is 24"
            )
        x = F.relu(self.conv1(img))
        x = F.relu(self.norm2(self.conv2(x)))
        x = F.relu(self.norm3(self.conv3(x)))
        x = F.relu(self.norm4(self.conv4(x)))
        logits = self.out_conv(x)
        return logits.squeeze(0) if squeeze else logits


class UDerainer(nn.Module):
    """3-scale U-shaped residual restorer; exactly the identity at init.

    The final conv starts at zero and the network carries a global
    input-to-output skip, so training only ever has to learn the residual
    (the rain layer). Inputs whose sides are not divisible by 4 are
    reflect-padded and cropped back.
    """

    DOWN_FACTOR = 4

    def __init__(self, width: int = 32):
        super().__init__()
        w = width
        self.stem1 = nn.Conv2d(3, w, 3, 1, 1)
        self.stem2 = nn.Conv2d(w, w, 3, 1, 1)
        self.down1 = nn.Conv2d(w, 2 * w, 3, 2, 1)
        self.enc2 = nn.Conv2d(2 * w, 2 * w, 3, 1, 1)
        self.down2 = nn.Conv2d(2 * w, 4 * w, 3, 2, 1)
        self.mid1 = nn.Conv2d(4 * w, 4 * w, 3, 1, 1)
        self.mid2 = nn.Conv2d(4 * w, 4 * w, 3, 1, 1)
        self.up1 = nn.Conv2d(4 * w, 2 * w, 3, 1, 1)
        self.fuse1 = nn.Conv2d(4 * w, 2 * w, 3, 1, 1)
        self.up2 = nn.Conv2d(2 * w, w, 3, 1, 1)
        self.fuse2 = nn.Conv2d(2 * w, w, 3, 1, 1)
        self.head = nn.Conv2d(w, 3, 3, 1, 1)
        self.post_init()

    def post_init(self):
        """Zero the output conv so the global skip makes the net an identity."""
        with torch.no_grad():
            self.head.weight.zero_()
            self.head.bias.zero_()

    def forward(self, rainy):
        rainy, squeeze = _as_batched(rainy, "rainy")
        h, w = rainy.shape[-2:]
        if min(h, w) < 4:
            raise InvalidInputError(f"derainer needs spatial dims >= 4, got {(h, w)}")
        pad_h = (-h) % self.DOWN_FACTOR
        pad_w = (-w) % self.DOWN_FACTOR
        x = F.pad(rainy, (0, pad_w, 0, pad_h), mode="reflect") if pad_h or pad_w else rainy

        s1 = F.relu(self.stem2(F.relu(self.stem1(x))))
        e2 = F.relu(self.enc2(F.relu(self.down1(s1))))
        m = F.relu(self.mid2(F.relu(self.mid1(F.relu(self.down2(e2))))))
        u1 = F.interpolate(m, size=e2.shape[-2:], mode="bilinear", align_corners=False)
        u1 = F.relu(self.up1(u1))
        u1 = F.relu(self.fuse1(torch.cat([u1, e2], dim=1)))
        u2 = F.interpolate(u1, size=s1.shape[-2:], mode="bilinear", align_corners=False)
        u2 = F.relu(self.up2(u2))
        u2 = F.relu(self.fuse2(torch.cat([u2, s1], dim=1)))
        residual = self.head(u2)[..., :h, :w]

        out = rainy + residual
        return out.squeeze(0) if squeeze else out


_DERAINERS = {"ushape": lambda cfg: UDerainer(width=cfg.width)}


def register_derainer(name: str, factory) -> None:
    """Make a drop-in derainer constructible by name (factory: config -> module)."""
    _DERAINERS[name] = factory


def make_derainer(config: DerainerConfig = DerainerConfig()) -> nn.Module:
    try:
        factory = _DERAINERS[config.arch]
    except KeyError:
        raise ConfigurationError(
            f"unknown derainer arch '{config.arch}'; registered: {sorted(_DERAINERS)}"
        ) from None
    return factory(config)


@dataclass
class ModelBundle:
    generator: nn.Module
    discriminator: nn.Module
    derainer: nn.Module

    def named_modules_flat(self):
        yield "generator", self.generator
        yield "discriminator", self.discriminator
        yield "derainer", self.derainer

    def named_parameters(self):
        for prefix, module in self.named_modules_flat():
            for name, p in module.named_parameters():
                yield f"{prefix}.{name}", p

    def validate(self) -> None:
        seen = set()
        for name, p in self.named_parameters():
            if name in seen:
                raise ConfigurationError(f"duplicate parameter name {name}")
            seen.add(name)
            if not torch.isfinite(p).all():
                raise ConfigurationError(f"non-finite values in parameter {name}")

    def train(self):
        for _, m in self.named_modules_flat():
            m.train()

    def eval(self):
        for _, m in self.named_modules_flat():
            m.eval()


def count_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def init_models(
    gen_config: GeneratorConfig = GeneratorConfig(),
    disc_config: DiscriminatorConfig = DiscriminatorConfig(),
    derainer_config: DerainerConfig = DerainerConfig(),
    seed: int = 0,
) -> ModelBundle:
    """Build all three networks and initialize them deterministically.

    Conv weights draw from normal(0, 0.02) under a dedicated generator
    seeded by `seed`, biases are zeroed; module-specific post_init hooks
    (e.g. the derainer's zero output conv) run last. Construction-time
    default init is fully overwritten, so equal seeds give bit-identical
    parameters regardless of global RNG state.
    """
    bundle = ModelBundle(
        generator=RainTransferGenerator(gen_config),
        discriminator=PatchDiscriminator(disc_config),
        derainer=make_derainer(derainer_config),
    )
    rng = torch.Generator().manual_seed(seed)
    for _, module in bundle.named_modules_flat():
        for m in module.modules():
            if isinstance(m, nn.Conv2d):
                with torch.no_grad():
                    m.weight.normal_(0.0, 0.02, generator=rng)
                    if m.bias is not None:
                        m.bias.zero_()
        if hasattr(module, "post_init"):
            module.post_init()
    bundle.validate()
    return bundle
