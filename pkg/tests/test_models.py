import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from csud.errors import ConfigurationError, InvalidInputError
from csud.models import (
    DerainerConfig,
    DiscriminatorConfig,
    GeneratorConfig,
    ModelBundle,
    PatchDiscriminator,
    RainTransferGenerator,
    UDerainer,
    count_params,
    init_models,
    make_derainer,
    register_derainer,
)

TINY_GEN = GeneratorConfig(
    base_channels=4, riem_down_channels=8, num_residual_blocks=1, trunk_channels=8
)


def conv_params(cin, cout, k):
    return cin * cout * k * k + cout


def expected_generator_params(cfg):
    b, d, n, t = (
        cfg.base_channels,
        cfg.riem_down_channels,
        cfg.num_residual_blocks,
        cfg.trunk_channels,
    )
    return (
        2 * conv_params(3, b, 7)  # cfem + first riem conv
        + conv_params(b, b, 7)
        + conv_params(b, d, 4)
        + conv_params(d, b, 3)
        + n * 2 * conv_params(t, t, 3)
        + conv_params(t, 3, 3)
    )


class TestGeneratorConfig:
    def test_trunk_must_match_concat_width(self):
        with pytest.raises(ConfigurationError):
            GeneratorConfig(base_channels=64, trunk_channels=100)

    def test_blocks_must_be_positive(self):
        with pytest.raises(ConfigurationError):
            GeneratorConfig(num_residual_blocks=0)


class TestGenerator:
    def test_default_param_count_golden(self):
        g = RainTransferGenerator()
        assert count_params(g) == 2_199_171
        assert count_params(g) == expected_generator_params(GeneratorConfig())

    def test_param_count_formula_other_config(self):
        cfg = GeneratorConfig(
            base_channels=16, riem_down_channels=32, num_residual_blocks=4, trunk_channels=32
        )
        assert count_params(RainTransferGenerator(cfg)) == expected_generator_params(cfg)

    @pytest.mark.parametrize("size", [16, 64])
    def test_shape_preserved(self, size):
        g = RainTransferGenerator(TINY_GEN)
        x = torch.rand(3, size, size)
        assert g(x, torch.rand(3, size, size)).shape == (3, size, size)

    def test_shape_preserved_256_default_config(self):
        g = RainTransferGenerator()
        with torch.no_grad():
            out = g(torch.rand(1, 3, 256, 256), torch.rand(1, 3, 256, 256))
        assert out.shape == (1, 3, 256, 256)
        assert torch.isfinite(out).all()

    def test_rectangular_and_odd_sizes(self):
        g = RainTransferGenerator(TINY_GEN)
        x = torch.rand(2, 3, 33, 47)
        assert g(x, torch.rand(2, 3, 33, 47)).shape == (2, 3, 33, 47)

    def test_spatial_mismatch_rejected(self):
        g = RainTransferGenerator(TINY_GEN)
        with pytest.raises(InvalidInputError, match="spatial"):
            g(torch.rand(3, 32, 32), torch.rand(3, 16, 16))

    def test_finite_for_random_inputs(self):
        bundle = init_models(gen_config=TINY_GEN, seed=3)
        out = bundle.generator(torch.rand(2, 3, 24, 24), torch.rand(2, 3, 24, 24))
        assert torch.isfinite(out).all()

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(0)
        g = RainTransferGenerator(TINY_GEN)
        x = torch.rand(3, 8, 8, requires_grad=True)
        y = torch.rand(3, 8, 8)

        def f(inp):
            return (g(inp, y) ** 2).sum()

        f(x).backward()
        analytic = x.grad.detach().clone()
        h = 1e-2
        rng = np.random.default_rng(1)
        for _ in range(5):
            c, i, j = rng.integers(0, 3), rng.integers(0, 8), rng.integers(0, 8)
            xp = x.detach().clone()
            xm = x.detach().clone()
            xp[c, i, j] += h
            xm[c, i, j] -= h
            with torch.no_grad():
                fd = (f(xp) - f(xm)) / (2 * h)
            rel = abs(fd.item() - analytic[c, i, j].item()) / max(abs(fd.item()), 1e-8)
            assert rel < 1e-2


class TestDiscriminator:
    def test_256_gives_30x30(self):
        d = PatchDiscriminator()
        with torch.no_grad():
            out = d(torch.rand(1, 3, 256, 256))
        assert out.shape == (1, 1, 30, 30)

    def test_64_gives_6x6(self):
        d = PatchDiscriminator()
        with torch.no_grad():
            out = d(torch.rand(3, 64, 64))
        assert out.shape == (1, 6, 6)
        assert torch.isfinite(out).all()

    @settings(max_examples=12, deadline=None)
    @given(h=st.integers(24, 72), w=st.integers(24, 72))
    def test_map_size_closed_form_matches_forward(self, h, w):
        cfg = DiscriminatorConfig(widths=(4, 8, 8, 8))
        d = PatchDiscriminator(cfg)
        with torch.no_grad():
            out = d(torch.rand(1, 3, h, w))
        assert out.shape == (1, 1, cfg.map_size(h), cfg.map_size(w))

    @pytest.mark.parametrize("size", [16, 20, 23])
    def test_empty_map_sizes_rejected(self, size):
        d = PatchDiscriminator(DiscriminatorConfig(widths=(4, 8, 8, 8)))
        with pytest.raises(InvalidInputError, match="empty logit map"):
            d(torch.rand(1, 3, size, size))

    def test_below_min_rejected(self):
        d = PatchDiscriminator()
        with pytest.raises(InvalidInputError, match=">= 16"):
            d(torch.rand(1, 3, 15, 64))

    def test_five_conv_layers(self):
        d = PatchDiscriminator()
        convs = [m for m in d.modules() if isinstance(m, torch.nn.Conv2d)]
        assert len(convs) == 5
        norms = [m for m in d.modules() if isinstance(m, torch.nn.InstanceNorm2d)]
        assert len(norms) == 3


class TestDerainer:
    def test_identity_at_init(self):
        der = UDerainer(width=8)
        x = torch.rand(2, 3, 32, 32)
        with torch.no_grad():
            out = der(x)
        assert torch.equal(out, x)

    def test_identity_holds_with_padding(self):
        der = UDerainer(width=8)
        x = torch.rand(3, 30, 42)
        with torch.no_grad():
            out = der(x)
        assert torch.equal(out, x)

    def test_shape_preserved_after_training_step(self):
        der = UDerainer(width=8)
        with torch.no_grad():
            der.head.weight.normal_(0, 0.02)
        for h, w in [(16, 16), (30, 42), (64, 64), (17, 35)]:
            out = der(torch.rand(1, 3, h, w))
            assert out.shape == (1, 3, h, w)
            assert torch.isfinite(out).all()

    def test_default_param_count_golden(self):
        w = 32
        expected = (
            conv_params(3, w, 3)
            + conv_params(w, w, 3)
            + conv_params(w, 2 * w, 3)
            + conv_params(2 * w, 2 * w, 3)
            + conv_params(2 * w, 4 * w, 3)
            + 2 * conv_params(4 * w, 4 * w, 3)
            + conv_params(4 * w, 2 * w, 3)
            + conv_params(4 * w, 2 * w, 3)
            + conv_params(2 * w, w, 3)
            + conv_params(2 * w, w, 3)
            + conv_params(w, 3, 3)
        )
        assert expected == 619_971
        assert count_params(UDerainer()) == expected

    def test_gradients_finite(self):
        der = UDerainer(width=8)
        x = torch.rand(1, 3, 20, 20, requires_grad=True)
        der(x).abs().mean().backward()
        assert torch.isfinite(x.grad).all()

    def test_too_small_rejected(self):
        with pytest.raises(InvalidInputError):
            UDerainer(width=8)(torch.rand(1, 3, 3, 3))

    def test_registry_plug_in(self):
        class Blur(torch.nn.Module):
            def forward(self, x):
                return x * 0.5

        register_derainer("halve", lambda cfg: Blur())
        try:
            der = make_derainer(DerainerConfig(arch="halve"))
            assert torch.equal(der(torch.ones(1, 3, 4, 4)), torch.full((1, 3, 4, 4), 0.5))
        finally:
            from csud.models import _DERAINERS

            _DERAINERS.pop("halve")

    def test_unknown_arch(self):
        with pytest.raises(ConfigurationError, match="unknown derainer"):
            make_derainer(DerainerConfig(arch="nope"))


@settings(max_examples=8, deadline=None)
@given(
    h=st.integers(8, 24).map(lambda v: 2 * v),
    w=st.integers(8, 24).map(lambda v: 2 * v),
)
def test_shape_preservation_property(h, w):
    g = RainTransferGenerator(TINY_GEN)
    der = UDerainer(width=4)
    x = torch.rand(3, h, w)
    with torch.no_grad():
        assert g(x, x).shape == (3, h, w)
        assert der(x).shape == (3, h, w)


class TestInitModels:
    def test_same_seed_bit_identical(self):
        kw = dict(
            gen_config=TINY_GEN,
            disc_config=DiscriminatorConfig(widths=(4, 8, 8, 8)),
            derainer_config=DerainerConfig(width=4),
        )
        a = init_models(seed=7, **kw)
        b = init_models(seed=7, **kw)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            assert torch.equal(pa, pb)

    def test_different_seeds_differ(self):
        a = init_models(gen_config=TINY_GEN, seed=1)
        b = init_models(gen_config=TINY_GEN, seed=2)
        same = all(
            torch.equal(pa, pb)
            for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters())
        )
        assert not same

    def test_global_rng_does_not_leak_in(self):
        torch.manual_seed(123)
        a = init_models(gen_config=TINY_GEN, seed=5)
        torch.manual_seed(999)
        b = init_models(gen_config=TINY_GEN, seed=5)
        for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert torch.equal(pa, pb)

    def test_derainer_identity_survives_init_sweep(self):
        bundle = init_models(derainer_config=DerainerConfig(width=8), seed=11)
        x = torch.rand(1, 3, 16, 16)
        with torch.no_grad():
            assert torch.equal(bundle.derainer(x), x)

    def test_all_params_finite_and_unique(self):
        bundle = init_models(gen_config=TINY_GEN, seed=0)
        bundle.validate()
        names = [n for n, _ in bundle.named_parameters()]
        assert len(names) == len(set(names))

    def test_biases_zero_weights_spread(self):
        bundle = init_models(gen_config=TINY_GEN, seed=0)
        conv = bundle.generator.cfem
        assert torch.equal(conv.bias, torch.zeros_like(conv.bias))
        assert 0.005 < conv.weight.std().item() < 0.05

    def test_validate_catches_nonfinite(self):
        bundle = init_models(gen_config=TINY_GEN, seed=0)
        with torch.no_grad():
            bundle.generator.cfem.weight[0, 0, 0, 0] = float("nan")
        with pytest.raises(ConfigurationError, match="non-finite"):
            bundle.validate()
