"""The joint training loop: graph construction, updates, checkpoints, resume.

Each step rebuilds the full generation graph from one unpaired batch:
pseudo-rainy x_s1 = G(x, y), derained images x_der and y_der, and the
second-round images x_s2, y_s1, y_s2 that give the four adversarial
constraints. The discriminator updates first on detached fakes, then a
combined generator+derainer step optimizes the total objective.

Determinism contract: a batch depends only on (corpus seed, global step),
model/optimizer state round-trips exactly through checkpoints, and forward
passes are deterministic single-threaded, so resuming from a checkpoint
replays the uninterrupted run bit-for-bit.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch

from csud.data import UnpairedCorpus, sample_unpaired_batch
from csud.errors import ConfigurationError, DivergenceError
from csud.losses import (
    GAN_MODES,
    LossReport,
    LossWeights,
    cc_loss,
    derainer_loss_terms,
    gan_loss_d,
    gan_terms_g,
    make_extractor,
    sr_loss_g,
    total_loss,
)
from csud.models import (
    DerainerConfig,
    DiscriminatorConfig,
    GeneratorConfig,
    ModelBundle,
    init_models,
)

CHECKPOINT_MAGIC = "CSUD1"
TRAINING_MODES = ("joint", "separate")

# compact sizes for CPU-scale smoke training; merged into TrainConfig.from_dict
# for keys the caller did not set explicitly when desk_scale is true.
# Separate mode is the default here because, at a 2000-step budget, joint
# training deadlocks: while the derainer is still near-identity its output
# y_der barely differs from y, so the self-reconstruction pull toward clean
# output for guide y_der cancels the adversarial push toward rainy output for
# guide y, and the generator never starts transferring rain. Training the
# generator alone first (phase one of separate mode) removes that conflict.
DESK_PROFILE = {
    "crop": 64,
    "batch_size": 2,
    "training_mode": "separate",
    "epochs_phase1": 67,
    "epochs_phase2": 33,
    "checkpoint_every": 500,
    "gen": {
        "base_channels": 16,
        "riem_down_channels": 32,
        "num_residual_blocks": 4,
        "trunk_channels": 32,
    },
    "disc": {"widths": (16, 32, 64, 64)},
    "derainer": {"width": 12},
}


@dataclass(frozen=True)
class TrainConfig:
    epochs_phase1: int = 200
    epochs_phase2: int = 100
    lr_phase1: float = 1e-4
    lr_phase2: float = 1e-5
    batch_size: int = 2
    crop: int = 256
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    num_gan_constraints: int = 4
    training_mode: str = "joint"
    gan_mode: str = "lsgan"
    perceptual_profile: str = "fixed-random"
    weights: LossWeights = LossWeights()
    seed: int = 0
    checkpoint_every: int = 500
    desk_scale: bool = False
    max_steps: int | None = None
    gen: GeneratorConfig = GeneratorConfig()
    disc: DiscriminatorConfig = DiscriminatorConfig()
    derainer: DerainerConfig = DerainerConfig()

    def __post_init__(self):
        for name in ("epochs_phase1", "epochs_phase2", "batch_size", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("lr_phase1", "lr_phase2"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.crop < 24:
            raise ConfigurationError(
                f"crop must be >= 24 (the discriminator's smallest workable input), "
                f"got {self.crop}"
            )
        if self.num_gan_constraints not in (1, 2, 4):
            raise ConfigurationError(
                f"num_gan_constraints must be 1, 2 or 4, got {self.num_gan_constraints}"
            )
        if self.training_mode not in TRAINING_MODES:
            raise ConfigurationError(
                f"training_mode must be one of {TRAINING_MODES}, got {self.training_mode!r}"
            )
        if self.gan_mode not in GAN_MODES:
            raise ConfigurationError(f"gan_mode must be one of {GAN_MODES}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigurationError(f"max_steps must be >= 1, got {self.max_steps}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["disc"]["widths"] = list(self.disc.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown train config key(s): {', '.join(unknown)}")
        merged = dict(d)
        if merged.get("desk_scale"):
            for key, value in DESK_PROFILE.items():
                merged.setdefault(key, value)
        kwargs = dict(merged)
        if "weights" in kwargs and isinstance(kwargs["weights"], dict):
            kwargs["weights"] = LossWeights.from_dict(kwargs["weights"])
        if "gen" in kwargs and isinstance(kwargs["gen"], dict):
            kwargs["gen"] = GeneratorConfig(**kwargs["gen"])
        if "disc" in kwargs and isinstance(kwargs["disc"], dict):
            disc = dict(kwargs["disc"])
            if "widths" in disc:
                disc["widths"] = tuple(disc["widths"])
            kwargs["disc"] = DiscriminatorConfig(**disc)
        if "derainer" in kwargs and isinstance(kwargs["derainer"], dict):
            kwargs["derainer"] = DerainerConfig(**kwargs["derainer"])
        return cls(**kwargs)

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        d = {"desk_scale": True}
        d.update(overrides)
        return cls.from_dict(d)


def steps_per_epoch(config: TrainConfig, corpus: UnpairedCorpus) -> int:
    n = max(len(corpus.clean_images), len(corpus.rainy_images))
    return max(1, n // config.batch_size)


@dataclass
class TrainState:
    config: TrainConfig
    bundle: ModelBundle
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    opt_der: torch.optim.Adam
    extractor: object
    step: int = 0

    def optimizers(self):
        return {"g": self.opt_g, "d": self.opt_d, "der": self.opt_der}


def make_state(config: TrainConfig) -> TrainState:
    bundle = init_models(config.gen, config.disc, config.derainer, seed=config.seed)
    betas = (config.adam_beta1, config.adam_beta2)

    def adam(module):
        return torch.optim.Adam(module.parameters(), lr=config.lr_phase1, betas=betas)

    return TrainState(
        config=config,
        bundle=bundle,
        opt_g=adam(bundle.generator),
        opt_d=adam(bundle.discriminator),
        opt_der=adam(bundle.derainer),
        extractor=make_extractor(config.perceptual_profile, seed=config.seed),
    )


def _check_finite(named_tensors) -> None:
    for name, t in named_tensors:
        if not torch.isfinite(t).all():
            raise DivergenceError(f"non-finite intermediate tensor: {name}")


def _fake_images(bundle: ModelBundle, x, y, num_constraints: int) -> dict:
    """Generated images of one step, gated by the adversarial-constraint count."""
    G, Der = bundle.generator, bundle.derainer
    t = {}
    t["x_s1"] = G(x, y)
    # the pseudo pair (x_s1, x) is training data for the derainer; detaching
    # here keeps every derainer-loss term (including the frozen-G
    # reconstruction) from backpropagating into G through the pair itself
    t["x_der"] = Der(t["x_s1"].detach())
    t["y_der"] = Der(y)
    if num_constraints == 4:
        t["x_s2"] = G(t["x_der"], t["x_s1"])
        t["y_s1"] = G(t["y_der"], y)
        t["y_s2"] = G(t["y_der"], t["x_s1"])
    elif num_constraints == 2:
        t["y_s1"] = G(t["y_der"], y)
    _check_finite(t.items())
    return t


def _fake_list(t: dict, num_constraints: int) -> list:
    if num_constraints == 4:
        return [t["x_s1"], t["x_s2"], t["y_s1"], t["y_s2"]]
    if num_constraints == 2:
        return [t["x_s1"], t["y_s1"]]
    return [t["x_s1"]]


def build_step_graph(bundle: ModelBundle, x, y, weights: LossWeights = LossWeights(),
                     extractor=None, num_gan_constraints: int = 4,
                     gan_mode: str = "lsgan"):
    """One full forward pass of the training graph, for inspection and tests.

    Returns (tensors, total, report): every intermediate image by name, the
    scalar generator+derainer objective, and the loss report (including the
    discriminator objective computed against the current D).
    """
    if x.shape != y.shape:
        raise ConfigurationError(
            f"clean and rainy batches must share a shape, got {tuple(x.shape)} vs {tuple(y.shape)}"
        )
    extractor = extractor or make_extractor("fixed-random")
    tensors = _fake_images(bundle, x, y, num_gan_constraints)
    fakes = _fake_list(tensors, num_gan_constraints)
    D, G = bundle.discriminator, bundle.generator

    d_loss = gan_loss_d(D, y, fakes, mode=gan_mode)
    parts = {
        "adv": gan_terms_g(D, fakes, mode=gan_mode),
        "cc": cc_loss(tensors["x_s1"], x),
        "sr_g": sr_loss_g(G, x, tensors["y_der"]),
        "d_loss": d_loss,
        **derainer_loss_terms(x, tensors["x_der"], extractor, G, tensors["y_der"]),
    }
    total, report = total_loss(parts, weights)
    return tensors, total, report


def _phase_at(config: TrainConfig, corpus: UnpairedCorpus, step: int) -> str:
    if config.training_mode == "joint":
        return "joint"
    per_phase = (config.epochs_phase1 + config.epochs_phase2) * steps_per_epoch(
        config, corpus
    )
    return "g" if step < per_phase else "der"


def _lr_at(config: TrainConfig, phase_local_step: int, spe: int) -> float:
    epoch = phase_local_step // spe
    return config.lr_phase1 if epoch < config.epochs_phase1 else config.lr_phase2


def _set_lr(optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def _params_finite_or_raise(bundle: ModelBundle, step: int) -> None:
    for name, p in bundle.named_parameters():
        if not torch.isfinite(p).all():
            raise DivergenceError(f"non-finite parameter {name} after step {step}")


def d_substep(state: TrainState, x, y, tensors: dict = None):
    """Discriminator update on detached fakes; G and Der stay bit-unchanged.

    Returns the generated-image map and the d-loss so the following
    generator substep can reuse the same graph.
    """
    cfg = state.config
    if tensors is None:
        tensors = _fake_images(state.bundle, x, y, cfg.num_gan_constraints)
    fakes = _fake_list(tensors, cfg.num_gan_constraints)
    d_loss = gan_loss_d(state.bundle.discriminator, y, fakes, mode=cfg.gan_mode)
    state.opt_d.zero_grad()
    d_loss.backward()
    state.opt_d.step()
    return tensors, d_loss


def g_der_substep(state: TrainState, x, y, tensors: dict, d_loss) -> LossReport:
    """Combined generator+derainer update against the current discriminator.

    Only opt_g and opt_der step, so discriminator parameters stay
    bit-unchanged (its gradient buffers are scratch, zeroed by the next
    d_substep).
    """
    cfg = state.config
    G = state.bundle.generator
    fakes = _fake_list(tensors, cfg.num_gan_constraints)
    parts = {
        "adv": gan_terms_g(state.bundle.discriminator, fakes, mode=cfg.gan_mode),
        "cc": cc_loss(tensors["x_s1"], x),
        "sr_g": sr_loss_g(G, x, tensors["y_der"]),
        "d_loss": d_loss,
        **derainer_loss_terms(x, tensors["x_der"], state.extractor, G, tensors["y_der"]),
    }
    total, report = total_loss(parts, cfg.weights)
    state.opt_g.zero_grad()
    state.opt_der.zero_grad()
    total.backward()
    state.opt_g.step()
    state.opt_der.step()
    return report


def _joint_step(state: TrainState, x, y) -> LossReport:
    tensors, d_loss = d_substep(state, x, y)
    return g_der_substep(state, x, y, tensors, d_loss)


def _gen_phase_step(state: TrainState, x, y) -> LossReport:
    """Separate mode, first phase: G and D only, derainer-independent losses."""
    cfg = state.config
    G, D = state.bundle.generator, state.bundle.discriminator
    x_s1 = G(x, y)
    _check_finite([("x_s1", x_s1)])
    fakes = [x_s1]

    d_loss = gan_loss_d(D, y, fakes, mode=cfg.gan_mode)
    state.opt_d.zero_grad()
    d_loss.backward()
    state.opt_d.step()

    zero = torch.zeros((), dtype=x.dtype)
    parts = {
        "adv": gan_terms_g(D, fakes, mode=cfg.gan_mode),
        "cc": cc_loss(x_s1, x),
        # only the rain-free-guide half of SR-G exists without a derainer
        "sr_g": (G(x, x) - x).abs().mean(),
        "d_loss": d_loss,
        "l1": zero,
        "ssim": zero,
        "perceptual": zero,
        "sr_der": zero,
    }
    total, report = total_loss(parts, cfg.weights)
    state.opt_g.zero_grad()
    total.backward()
    state.opt_g.step()
    return report


def _der_phase_step(state: TrainState, x, y) -> LossReport:
    """Separate mode, second phase: derainer on frozen-G pseudo pairs."""
    cfg = state.config
    G, Der = state.bundle.generator, state.bundle.derainer
    with torch.no_grad():
        x_s1 = G(x, y)
    _check_finite([("x_s1", x_s1)])
    x_der = Der(x_s1)
    y_der = Der(y)
    _check_finite([("x_der", x_der), ("y_der", y_der)])

    zero = torch.zeros((), dtype=x.dtype)
    parts = {
        "adv": [zero],
        "cc": zero,
        "sr_g": zero,
        "d_loss": zero,
        **derainer_loss_terms(x, x_der, state.extractor, G, y_der),
    }
    total, report = total_loss(parts, cfg.weights)
    state.opt_der.zero_grad()
    total.backward()
    state.opt_der.step()
    return report


def train_step(state: TrainState, batch, phase: str = "joint") -> LossReport:
    """Run one optimization step and advance the step counter."""
    x, y = batch
    if phase == "joint":
        report = _joint_step(state, x, y)
    elif phase == "g":
        report = _gen_phase_step(state, x, y)
    elif phase == "der":
        report = _der_phase_step(state, x, y)
    else:
        raise ConfigurationError(f"unknown training phase {phase!r}")
    state.step += 1
    _params_finite_or_raise(state.bundle, state.step)
    return report


def save_checkpoint(path, state: TrainState) -> None:
    """Atomically write the full training state (write temp, then rename)."""
    path = Path(path)
    payload = {
        "magic": CHECKPOINT_MAGIC,
        "step": state.step,
        "config": state.config.to_dict(),
        "models": {
            name: module.state_dict() for name, module in state.bundle.named_modules_flat()
        },
        "optimizers": {name: opt.state_dict() for name, opt in state.optimizers().items()},
        "torch_rng": torch.get_rng_state(),
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise ConfigurationError(f"{path} is not a readable checkpoint: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("magic") != CHECKPOINT_MAGIC:
        raise ConfigurationError(
            f"{path} is not a recognized checkpoint (missing magic {CHECKPOINT_MAGIC!r})"
        )
    return payload


def state_from_checkpoint(payload: dict) -> TrainState:
    config = TrainConfig.from_dict(payload["config"])
    state = make_state(config)
    for name, module in state.bundle.named_modules_flat():
        module.load_state_dict(payload["models"][name])
    for name, opt in state.optimizers().items():
        opt.load_state_dict(payload["optimizers"][name])
    state.step = payload["step"]
    torch.set_rng_state(payload["torch_rng"])
    return state


@dataclass
class TrainResult:
    final_checkpoint: Path
    log_paths: list
    steps: int
    elapsed_seconds: float


def total_steps(config: TrainConfig, corpus: UnpairedCorpus) -> int:
    spe = steps_per_epoch(config, corpus)
    per_schedule = (config.epochs_phase1 + config.epochs_phase2) * spe
    n = per_schedule * (2 if config.training_mode == "separate" else 1)
    if config.max_steps is not None:
        n = min(n, config.max_steps)
    return n


def train(config: TrainConfig, corpus: UnpairedCorpus, out_dir,
          resume=None, log_every: int = 1) -> TrainResult:
    """Run the configured schedule over the corpus, writing logs/checkpoints.

    With resume=<checkpoint path>, training continues from the stored step
    and replays the uninterrupted run exactly (single-threaded). On
    divergence the last written checkpoint is left in place and the error
    propagates after an abort note is logged.
    """
    torch.set_num_threads(1)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if resume is not None:
        payload = load_checkpoint(resume)
        stored = TrainConfig.from_dict(payload["config"])
        # max_steps is a run-length cap, not part of the run's identity;
        # resuming an interrupted run naturally extends it
        if dataclasses.replace(stored, max_steps=None) != dataclasses.replace(
            config, max_steps=None
        ):
            raise ConfigurationError(
                "resume checkpoint was written under a different config; "
                "pass the identical config to continue the run"
            )
        state = state_from_checkpoint(payload)
    else:
        state = make_state(config)

    if corpus.crop != config.crop:
        raise ConfigurationError(
            f"corpus crop {corpus.crop} does not match config crop {config.crop}"
        )
    corpus.next_step = state.step

    spe = steps_per_epoch(config, corpus)
    n_steps = total_steps(config, corpus)
    per_phase = (config.epochs_phase1 + config.epochs_phase2) * spe

    logs = {}

    def log_file(phase: str) -> Path:
        name = "train_log.jsonl" if phase == "joint" else f"phase_{phase}.jsonl"
        if phase not in logs:
            logs[phase] = open(out_dir / name, "a")
        return logs[phase]

    start = time.monotonic()
    try:
        while state.step < n_steps:
            step = state.step
            phase = _phase_at(config, corpus, step)
            phase_local = step if phase != "der" else step - per_phase
            lr = _lr_at(config, phase_local, spe)
            for opt in state.optimizers().values():
                _set_lr(opt, lr)

            batch = sample_unpaired_batch(corpus, config.batch_size, step=step)
            try:
                report = train_step(state, batch, phase=phase)
            except DivergenceError as err:
                fh = log_file(phase)
                fh.write(json.dumps({
                    "step": step, "event": "divergence", "error": str(err),
                }) + "\n")
                fh.flush()
                raise

            if (step + 1) % log_every == 0 or step + 1 == n_steps:
                fh = log_file(phase)
                fh.write(json.dumps({
                    "step": step + 1,
                    "epoch": phase_local // spe,
                    "lr": lr,
                    "losses": report.to_dict(),
                }) + "\n")
                fh.flush()

            if state.step % config.checkpoint_every == 0 or state.step == n_steps:
                save_checkpoint(out_dir / f"ckpt_step{state.step}.pt", state)
    finally:
        for fh in logs.values():
            fh.close()

    final = out_dir / "ckpt_final.pt"
    save_checkpoint(final, state)
    return TrainResult(
        final_checkpoint=final,
        log_paths=sorted(out_dir.glob("*.jsonl")),
        steps=state.step,
        elapsed_seconds=time.monotonic() - start,
    )
