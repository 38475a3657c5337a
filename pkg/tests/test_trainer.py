"""Training-loop behavior: config plumbing, step graph, update isolation,
determinism, checkpointing, resume, the two-phase separate mode, and
divergence handling. All runs use micro-sized models so the whole module
stays in the low seconds on one CPU core."""

import dataclasses
import json
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from csud.data import UnpairedCorpus
from csud.errors import ConfigurationError, DivergenceError
from csud.imagecore import save_image
from csud.models import DerainerConfig, DiscriminatorConfig, GeneratorConfig
from csud.trainer import (
    CHECKPOINT_MAGIC,
    TrainConfig,
    build_step_graph,
    d_substep,
    g_der_substep,
    load_checkpoint,
    make_state,
    save_checkpoint,
    state_from_checkpoint,
    steps_per_epoch,
    total_steps,
    train,
    train_step,
)

torch.set_num_threads(1)


def micro_config(**kw):
    base = dict(
        crop=24,
        batch_size=1,
        epochs_phase1=2,
        epochs_phase2=1,
        gen=GeneratorConfig(
            base_channels=4, riem_down_channels=8, num_residual_blocks=1, trunk_channels=8
        ),
        disc=DiscriminatorConfig(widths=(4, 8, 8, 8)),
        derainer=DerainerConfig(width=4),
        checkpoint_every=2,
        seed=3,
    )
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def image_dirs(tmp_path_factory):
    td = tmp_path_factory.mktemp("trainer-corpus")
    rng = np.random.default_rng(7)
    (td / "clean").mkdir()
    (td / "rainy").mkdir()
    for i in range(2):
        save_image(rng.random((3, 32, 32), dtype=np.float32), td / "clean" / f"{i}.png")
        save_image(rng.random((3, 32, 32), dtype=np.float32), td / "rainy" / f"{i}.png")
    return td


def make_corpus(image_dirs, cfg):
    return UnpairedCorpus.from_dirs(
        image_dirs / "clean", image_dirs / "rainy", crop=cfg.crop, seed=cfg.seed
    )


def read_log(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


def param_snapshot(module):
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def snapshots_equal(a, b):
    return set(a) == set(b) and all(torch.equal(a[k], b[k]) for k in a)


class TestTrainConfig:
    def test_defaults_match_published_schedule(self):
        cfg = TrainConfig()
        assert cfg.epochs_phase1 == 200 and cfg.epochs_phase2 == 100
        assert cfg.lr_phase1 == 1e-4 and cfg.lr_phase2 == 1e-5
        assert cfg.batch_size == 2 and cfg.crop == 256
        assert cfg.num_gan_constraints == 4 and cfg.training_mode == "joint"

    @pytest.mark.parametrize(
        "kw",
        [
            {"training_mode": "alternating"},
            {"num_gan_constraints": 3},
            {"crop": 16},
            {"lr_phase1": 0.0},
            {"epochs_phase1": 0},
            {"max_steps": 0},
            {"gan_mode": "wgan"},
        ],
    )
    def test_rejects_bad_values(self, kw):
        with pytest.raises(ConfigurationError):
            TrainConfig(**kw)

    def test_json_round_trip(self):
        cfg = micro_config(num_gan_constraints=2, gan_mode="bce")
        recovered = TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert recovered == cfg

    def test_from_dict_rejects_unknown_key(self):
        with pytest.raises(ConfigurationError, match="learning_rate"):
            TrainConfig.from_dict({"learning_rate": 1e-4})

    def test_desk_profile_fills_unset_fields(self):
        cfg = TrainConfig.desk()
        assert cfg.desk_scale
        assert cfg.crop == 64 and cfg.batch_size == 2
        assert cfg.training_mode == "separate"
        assert (cfg.epochs_phase1, cfg.epochs_phase2) == (67, 33)
        assert cfg.gen.base_channels == 16 and cfg.gen.num_residual_blocks == 4
        assert cfg.disc.widths == (16, 32, 64, 64)
        assert cfg.derainer.width == 12

    def test_desk_profile_runs_2000_steps_on_the_desk_corpus(self):
        # 20 clean + 20 rainy images at batch 2 give 10 steps per epoch;
        # (67 + 33) epochs per phase, two phases
        cfg = TrainConfig.desk()
        corpus = SimpleNamespace(clean_images=[None] * 20, rainy_images=[None] * 20)
        assert steps_per_epoch(cfg, corpus) == 10
        assert total_steps(cfg, corpus) == 2000

    def test_desk_profile_yields_to_explicit_values(self):
        cfg = TrainConfig.desk(crop=128, epochs_phase1=10)
        assert cfg.crop == 128 and cfg.epochs_phase1 == 10
        assert cfg.derainer.width == 12


class TestSchedule:
    def test_steps_per_epoch_and_totals(self, image_dirs):
        cfg = micro_config()
        corpus = make_corpus(image_dirs, cfg)
        assert steps_per_epoch(cfg, corpus) == 2
        assert total_steps(cfg, corpus) == 6
        sep = micro_config(training_mode="separate")
        assert total_steps(sep, corpus) == 12
        capped = micro_config(max_steps=4)
        assert total_steps(capped, corpus) == 4

    def test_lr_drops_after_first_phase(self, image_dirs, tmp_path):
        cfg = micro_config()
        train(cfg, make_corpus(image_dirs, cfg), tmp_path)
        lrs = [line["lr"] for line in read_log(tmp_path / "train_log.jsonl")]
        assert lrs == [1e-4] * 4 + [1e-5] * 2

    def test_default_schedule_lr_at_epoch_200(self):
        from csud.trainer import _lr_at

        cfg = TrainConfig()
        assert _lr_at(cfg, 199, 1) == 1e-4
        assert _lr_at(cfg, 200, 1) == 1e-5


class TestStepGraph:
    def setup_method(self):
        self.cfg = micro_config()
        self.state = make_state(self.cfg)
        gen = torch.Generator().manual_seed(11)
        self.x = torch.rand(1, 3, 24, 24, generator=gen)
        self.y = torch.rand(1, 3, 24, 24, generator=gen)

    def graph(self, **kw):
        return build_step_graph(
            self.state.bundle, self.x, self.y,
            weights=self.cfg.weights, extractor=self.state.extractor, **kw,
        )

    def test_full_graph_names_and_shapes(self):
        tensors, total, report = self.graph()
        assert sorted(tensors) == ["x_der", "x_s1", "x_s2", "y_der", "y_s1", "y_s2"]
        for t in tensors.values():
            assert t.shape == self.x.shape
        assert torch.isfinite(total)
        assert not report.nonfinite_keys()

    def test_constraint_count_gates_graph_and_report(self):
        tensors, _, report = self.graph(num_gan_constraints=1)
        assert sorted(tensors) == ["x_der", "x_s1", "y_der"]
        assert report.adv1 > 0
        assert report.adv2 == report.adv3 == report.adv4 == 0.0

        tensors2, _, report2 = self.graph(num_gan_constraints=2)
        assert sorted(tensors2) == ["x_der", "x_s1", "y_der", "y_s1"]
        assert report2.adv1 > 0 and report2.adv2 > 0
        assert report2.adv3 == report2.adv4 == 0.0

    def test_total_matches_report_recombination(self):
        _, total, r = self.graph()
        w = self.cfg.weights
        gan_g = (r.adv1 + r.adv2 + r.adv3 + r.adv4) / 4
        der = r.l1 + w.lambda1 * r.ssim + w.lambda2 * r.perceptual + w.lambda3 * r.sr_der
        expected = gan_g + der + w.alpha1 * r.cc + w.alpha2 * r.sr_g
        assert total.detach().item() == pytest.approx(expected, rel=1e-5)
        assert r.total_g == pytest.approx(expected, rel=1e-5)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ConfigurationError, match="share a shape"):
            build_step_graph(self.state.bundle, self.x, self.y[:, :, :16, :16])

    def test_nonfinite_intermediate_names_first_bad_tensor(self):
        with torch.no_grad():
            self.state.bundle.generator.head.weight.fill_(1e38)
            self.state.bundle.generator.head.bias.fill_(1e38)
        with pytest.raises(DivergenceError, match="x_s1"):
            self.graph()


class TestUpdateIsolation:
    def setup_method(self):
        self.cfg = micro_config()
        self.state = make_state(self.cfg)
        gen = torch.Generator().manual_seed(5)
        self.x = torch.rand(1, 3, 24, 24, generator=gen)
        self.y = torch.rand(1, 3, 24, 24, generator=gen)

    def test_d_substep_touches_only_discriminator(self):
        b = self.state.bundle
        g0, der0, d0 = map(param_snapshot, (b.generator, b.derainer, b.discriminator))
        d_substep(self.state, self.x, self.y)
        assert snapshots_equal(param_snapshot(b.generator), g0)
        assert snapshots_equal(param_snapshot(b.derainer), der0)
        assert not snapshots_equal(param_snapshot(b.discriminator), d0)

    def test_g_der_substep_leaves_discriminator_bit_unchanged(self):
        b = self.state.bundle
        tensors, d_loss = d_substep(self.state, self.x, self.y)
        d0 = param_snapshot(b.discriminator)
        g0, der0 = param_snapshot(b.generator), param_snapshot(b.derainer)
        g_der_substep(self.state, self.x, self.y, tensors, d_loss)
        assert snapshots_equal(param_snapshot(b.discriminator), d0)
        assert not snapshots_equal(param_snapshot(b.generator), g0)
        assert not snapshots_equal(param_snapshot(b.derainer), der0)

    def test_train_step_advances_counter_and_reports(self):
        report = train_step(self.state, (self.x, self.y))
        assert self.state.step == 1
        assert not report.nonfinite_keys()

    def test_poisoned_input_raises_divergence_naming_tensor(self):
        with torch.no_grad():
            self.state.bundle.derainer.head.weight[0, 0, 0, 0] = float("nan")
        with pytest.raises(DivergenceError, match="x_der"):
            train_step(self.state, (self.x, self.y))

    def test_parameter_sweep_names_offending_parameter(self):
        from csud.trainer import _params_finite_or_raise

        with torch.no_grad():
            self.state.bundle.generator.head.weight[0, 0, 0, 0] = float("inf")
        with pytest.raises(DivergenceError, match="generator.head.weight"):
            _params_finite_or_raise(self.state.bundle, 7)


class TestDeterminismAndResume:
    def test_two_runs_produce_identical_loss_sequences(self, image_dirs, tmp_path):
        cfg = micro_config()
        train(cfg, make_corpus(image_dirs, cfg), tmp_path / "a")
        train(cfg, make_corpus(image_dirs, cfg), tmp_path / "b")
        la = read_log(tmp_path / "a" / "train_log.jsonl")
        lb = read_log(tmp_path / "b" / "train_log.jsonl")
        assert len(la) == 6
        assert all(x["losses"] == y["losses"] for x, y in zip(la, lb))

    def test_resume_replays_uninterrupted_run_exactly(self, image_dirs, tmp_path):
        cfg = micro_config()
        train(cfg, make_corpus(image_dirs, cfg), tmp_path / "full")
        full = read_log(tmp_path / "full" / "train_log.jsonl")

        short = micro_config(max_steps=4)
        train(short, make_corpus(image_dirs, short), tmp_path / "split")
        train(
            cfg,
            make_corpus(image_dirs, cfg),
            tmp_path / "split",
            resume=tmp_path / "split" / "ckpt_step4.pt",
        )
        split = read_log(tmp_path / "split" / "train_log.jsonl")
        tail_full = [l for l in full if l["step"] > 4]
        tail_split = [l for l in split if l["step"] > 4]
        assert tail_full == tail_split

    def test_resume_under_different_config_rejected(self, image_dirs, tmp_path):
        cfg = micro_config(max_steps=2)
        train(cfg, make_corpus(image_dirs, cfg), tmp_path)
        other = micro_config(seed=99)
        with pytest.raises(ConfigurationError, match="different config"):
            train(other, make_corpus(image_dirs, other), tmp_path / "x",
                  resume=tmp_path / "ckpt_step2.pt")

    def test_corpus_crop_mismatch_rejected(self, image_dirs, tmp_path):
        cfg = micro_config()
        corpus = UnpairedCorpus.from_dirs(
            image_dirs / "clean", image_dirs / "rainy", crop=28, seed=cfg.seed
        )
        with pytest.raises(ConfigurationError, match="crop"):
            train(cfg, corpus, tmp_path)


class TestCheckpointFile:
    def test_archive_contents_and_round_trip(self, tmp_path):
        cfg = micro_config()
        state = make_state(cfg)
        gen = torch.Generator().manual_seed(2)
        batch = (torch.rand(1, 3, 24, 24, generator=gen),
                 torch.rand(1, 3, 24, 24, generator=gen))
        train_step(state, batch)
        path = tmp_path / "ck.pt"
        save_checkpoint(path, state)
        assert not list(tmp_path.glob("*.tmp"))

        payload = load_checkpoint(path)
        assert payload["magic"] == CHECKPOINT_MAGIC
        assert payload["step"] == 1
        assert set(payload["models"]) == {"generator", "discriminator", "derainer"}
        assert set(payload["optimizers"]) == {"g", "d", "der"}

        restored = state_from_checkpoint(payload)
        for (name_a, a), (name_b, b) in zip(
            state.bundle.named_parameters(), restored.bundle.named_parameters()
        ):
            assert name_a == name_b
            assert torch.equal(a, b)

    def test_rejects_file_without_magic(self, tmp_path):
        bogus = tmp_path / "bogus.pt"
        torch.save({"step": 3}, bogus)
        with pytest.raises(ConfigurationError, match="CSUD1"):
            load_checkpoint(bogus)

    def test_missing_file_is_a_config_error(self, tmp_path):
        with pytest.raises(ConfigurationError, match="not found"):
            load_checkpoint(tmp_path / "absent.pt")

    def test_cadence_and_final_checkpoint(self, image_dirs, tmp_path):
        cfg = micro_config()
        result = train(cfg, make_corpus(image_dirs, cfg), tmp_path)
        names = sorted(p.name for p in tmp_path.glob("*.pt"))
        assert names == ["ckpt_final.pt", "ckpt_step2.pt", "ckpt_step4.pt", "ckpt_step6.pt"]
        assert result.final_checkpoint == tmp_path / "ckpt_final.pt"
        assert result.steps == 6


class TestSeparateMode:
    def test_two_phase_logs_with_expected_loss_support(self, image_dirs, tmp_path):
        cfg = micro_config(training_mode="separate")
        result = train(cfg, make_corpus(image_dirs, cfg), tmp_path)
        assert result.steps == 12
        g_log = read_log(tmp_path / "phase_g.jsonl")
        der_log = read_log(tmp_path / "phase_der.jsonl")
        assert [l["step"] for l in g_log] == list(range(1, 7))
        assert [l["step"] for l in der_log] == list(range(7, 13))
        for line in g_log:
            losses = line["losses"]
            assert losses["adv1"] > 0 and losses["cc"] > 0 and losses["sr_g"] > 0
            assert losses["l1"] == losses["ssim"] == losses["sr_der"] == 0.0
        for line in der_log:
            losses = line["losses"]
            assert losses["l1"] > 0 and losses["sr_der"] > 0
            assert losses["adv1"] == losses["cc"] == losses["sr_g"] == 0.0

    def test_derainer_frozen_in_first_phase_generator_in_second(self, image_dirs, tmp_path):
        cfg = micro_config(training_mode="separate", checkpoint_every=6)
        train(cfg, make_corpus(image_dirs, cfg), tmp_path)
        boundary = load_checkpoint(tmp_path / "ckpt_step6.pt")
        final = load_checkpoint(tmp_path / "ckpt_step12.pt")

        fresh = make_state(cfg)
        init_der = fresh.bundle.derainer.state_dict()
        for key, value in boundary["models"]["derainer"].items():
            assert torch.equal(value, init_der[key])
        for name in ("generator", "discriminator"):
            for key, value in final["models"][name].items():
                assert torch.equal(value, boundary["models"][name][key])
        changed = any(
            not torch.equal(final["models"]["derainer"][k], boundary["models"]["derainer"][k])
            for k in init_der
        )
        assert changed


class TestDivergenceInTrainLoop:
    def test_abort_retains_last_good_checkpoint_and_logs_event(self, image_dirs, tmp_path):
        cfg = micro_config(max_steps=2, checkpoint_every=2)
        train(cfg, make_corpus(image_dirs, cfg), tmp_path)
        good = load_checkpoint(tmp_path / "ckpt_step2.pt")
        poisoned = dict(good)
        poisoned["models"] = {k: dict(v) for k, v in good["models"].items()}
        key = next(iter(poisoned["models"]["generator"]))
        bad = poisoned["models"]["generator"][key].clone()
        bad.view(-1)[0] = float("inf")
        poisoned["models"]["generator"][key] = bad
        torch.save(poisoned, tmp_path / "poisoned.pt")

        full = micro_config()
        with pytest.raises(DivergenceError):
            train(full, make_corpus(image_dirs, full), tmp_path,
                  resume=tmp_path / "poisoned.pt")

        assert (tmp_path / "ckpt_step2.pt").is_file()
        events = [l for l in read_log(tmp_path / "train_log.jsonl") if "event" in l]
        assert events and events[-1]["event"] == "divergence"
