import numpy as np
import pytest
import torch
import torch.nn as nn

from freqreg.adversarial import (
    LossWeights,
    NetworkBundle,
    PatchDiscriminator,
    ResidualGenerator,
    TrainingMode,
    cycle_loss,
    discriminator_objective,
    generator_objective,
    identity_loss,
    lsgan_discriminator_loss,
    lsgan_generator_loss,
)
from freqreg.kspace import build_radial_mask, frequency_loss
from freqreg.registration import RegistrationNetwork, resample


class _Identity(nn.Module):
    def forward(self, x):
        return x


class _Const(nn.Module):
    def __init__(self, value: float):
        super().__init__()
        self.value = value

    def forward(self, x):
        return torch.full_like(x, self.value)


def small_bundle(seed=0):
    torch.manual_seed(seed)
    return NetworkBundle(
        g=ResidualGenerator(1, 4),
        f=ResidualGenerator(1, 4),
        d_x=PatchDiscriminator(2, 4),
        d_y=PatchDiscriminator(2, 4),
        r_x=RegistrationNetwork((4, 8)),
        r_y=RegistrationNetwork((4, 8)),
    )


def rand_batch(seed=0, n=2, size=32):
    rng = np.random.default_rng(seed)
    x = torch.from_numpy(rng.random((n, 1, size, size))).to(torch.float32)
    y = torch.from_numpy(rng.random((n, 1, size, size))).to(torch.float32)
    return x, y


class TestTrainingMode:
    def test_parse_round_trip(self):
        for token in ("gan", "gan+n", "gan+n+r", "gan+r+f_low", "cycle+n+r2+f_all"):
            assert TrainingMode.parse(token).token() == token

    def test_aliases(self):
        assert TrainingMode.parse("cycle_gan+noise").family == "cycle_gan"
        assert TrainingMode.parse("cycle_gan+noise").noise is True

    def test_dual_requires_cycle(self):
        with pytest.raises(ValueError, match="cycle_gan"):
            TrainingMode(family="gan", registration="dual")

    def test_invalid_tokens(self):
        with pytest.raises(ValueError):
            TrainingMode.parse("pix2pix")
        with pytest.raises(ValueError, match="flag"):
            TrainingMode.parse("gan+bogus")

    def test_enumerates_twenty_objectives(self):
        modes = TrainingMode.enumerate_objectives()
        assert len(modes) == 20
        assert len({m.token() for m in modes}) == 20

    def test_labels(self):
        assert TrainingMode.parse("gan+n+r").label() == "GAN w/ n, r"
        assert TrainingMode.parse("gan").label() == "GAN w/o n, r"
        assert TrainingMode.parse("cycle+n+r2+f_low").label() == "CycleGAN w/ n, r2 + f_low"


class TestLossWeights:
    def test_rejects_negative(self):
        with pytest.raises(ValueError, match=">= 0"):
            LossWeights(correction=-1.0)

    def test_w_freq_range(self):
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            LossWeights(w_freq=2.0)

    def test_w_freq_follows_mode_preset(self):
        w = LossWeights()
        assert w.resolve_w_freq(TrainingMode.parse("gan+f_low")) == 1.0
        assert w.resolve_w_freq(TrainingMode.parse("gan+f_hi")) == 0.0
        assert w.resolve_w_freq(TrainingMode.parse("gan+f_all")) == 0.5
        assert LossWeights(w_freq=0.25).resolve_w_freq(TrainingMode.parse("gan+f_low")) == 0.25


class TestLsganLosses:
    def test_discriminator_goldens(self):
        ones, zeros = torch.ones(2, 1, 4, 4), torch.zeros(2, 1, 4, 4)
        half = torch.full((2, 1, 4, 4), 0.5)
        assert float(lsgan_discriminator_loss(ones, zeros)) == 0.0
        assert float(lsgan_discriminator_loss(zeros, ones)) == 2.0
        assert float(lsgan_discriminator_loss(half, half)) == 0.5

    def test_generator_goldens(self):
        ones, zeros = torch.ones(3, 5), torch.zeros(3, 5)
        half = torch.full((3, 5), 0.5)
        assert float(lsgan_generator_loss(ones)) == 0.0
        assert float(lsgan_generator_loss(zeros)) == 1.0
        assert float(lsgan_generator_loss(half)) == 0.25


class TestCycleIdentityLosses:
    def test_identity_maps_give_zero(self):
        x, y = rand_batch(1)
        g = f = _Identity()
        assert float(cycle_loss(x, y, g, f)) == 0.0
        assert float(identity_loss(x, y, g, f)) == 0.0

    def test_constant_offset_cycle(self):
        x, y = rand_batch(2)
        g = _Identity()

        class _PlusTenth(nn.Module):
            def forward(self, t):
                return t + 0.1

        # F(G(x)) = x + 0.1 and G(F(y)) = y + 0.1: both arms off by 0.1
        assert float(cycle_loss(x, y, g, _PlusTenth())) == pytest.approx(0.2, rel=1e-6)

    def test_involution_inversion_gives_zero(self):
        x, y = rand_batch(3)

        class _Invert(nn.Module):
            def forward(self, t):
                return 1.0 - t

        assert float(cycle_loss(x, y, _Invert(), _Invert())) < 1e-7

    def test_literal_form_compares_across_domains(self):
        x, y = rand_batch(4)
        g = f = _Identity()
        literal = float(cycle_loss(x, y, g, f, literal_form=True))
        expected = float((x - y).abs().mean()) * 2.0
        assert literal == pytest.approx(expected, rel=1e-6)

    def test_identity_loss_goldens(self):
        x = torch.full((1, 1, 8, 8), 0.5)
        y = torch.full((1, 1, 8, 8), 0.5)

        class _PlusTwoTenths(nn.Module):
            def forward(self, t):
                return t + 0.2

        assert float(identity_loss(x, y, _PlusTwoTenths(), _Identity())) == pytest.approx(0.2)
        zero = _Const(0.0)
        assert float(identity_loss(x, y, zero, zero)) == pytest.approx(1.0)


class TestNetworks:
    def test_generator_contract(self):
        torch.manual_seed(0)
        gen = ResidualGenerator(blocks=2, base=4)
        out = gen(torch.rand(2, 1, 32, 32))
        assert out.shape == (2, 1, 32, 32)
        assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0

    def test_generator_rejects_indivisible(self):
        gen = ResidualGenerator(1, 4)
        with pytest.raises(ValueError, match="divisible"):
            gen(torch.rand(1, 1, 30, 30))

    def test_discriminator_score_map(self):
        torch.manual_seed(0)
        disc = PatchDiscriminator(layers=3, base=8)
        out = disc(torch.rand(2, 1, 64, 64))
        assert out.shape[0] == 2 and out.shape[1] == 1
        assert out.shape[2] > 1 and out.shape[3] > 1


class TestGeneratorObjective:
    def test_all_modes_finite_with_consistent_breakdown(self):
        nets = small_bundle()
        x, y = rand_batch(5)
        for mode in TrainingMode.enumerate_objectives():
            weights = LossWeights(mask_radius=3)
            total, parts = generator_objective(mode, weights, (x, y), nets)
            assert torch.isfinite(total), mode.token()
            recomputed = sum(float(v) for v in parts.values())
            assert abs(float(total) - recomputed) <= 1e-6 * max(abs(float(total)), 1e-9)
            assert all(float(v) >= 0.0 for v in parts.values()), mode.token()

    def test_expected_components_per_mode(self):
        nets = small_bundle()
        x, y = rand_batch(6)
        weights = LossWeights(mask_radius=3)
        _, parts = generator_objective(TrainingMode.parse("gan"), weights, (x, y), nets)
        assert sorted(parts) == ["adv_g", "corr_g"]
        _, parts = generator_objective(TrainingMode.parse("gan+r+f_low"), weights, (x, y), nets)
        assert sorted(parts) == ["adv_g", "corr_g", "freq_g", "smooth_g"]
        _, parts = generator_objective(TrainingMode.parse("cycle"), weights, (x, y), nets)
        assert sorted(parts) == ["adv_f", "adv_g", "cycle", "identity"]
        _, parts = generator_objective(TrainingMode.parse("cycle+r2+f_hi"), weights, (x, y), nets)
        assert sorted(parts) == [
            "adv_f", "adv_g", "corr_f", "corr_g", "cycle",
            "freq_f", "freq_g", "identity", "smooth_f", "smooth_g",
        ]

    def test_fixed_point_is_zero_for_every_mode(self):
        # G(x) == y (aligned identity batch), zero fields, D scoring 1 on fakes
        x, _ = rand_batch(7)
        y = x.clone()
        torch.manual_seed(0)
        nets = NetworkBundle(
            g=_Identity(), f=_Identity(),
            d_x=_Const(1.0), d_y=_Const(1.0),
            r_x=RegistrationNetwork((4, 8)), r_y=RegistrationNetwork((4, 8)),
        )
        weights = LossWeights(mask_radius=3)
        for mode in TrainingMode.enumerate_objectives():
            total, _parts = generator_objective(mode, weights, (x, y), nets)
            assert float(total) == 0.0, mode.token()

    def test_plain_cycle_matches_manual_assembly(self):
        nets = small_bundle(1)
        x, y = rand_batch(8)
        weights = LossWeights()
        total, _ = generator_objective(TrainingMode.parse("cycle"), weights, (x, y), nets)
        manual = (
            lsgan_generator_loss(nets.d_y(nets.g(x)))
            + lsgan_generator_loss(nets.d_x(nets.f(y)))
            + weights.cycle * cycle_loss(x, y, nets.g, nets.f)
            + weights.identity * identity_loss(x, y, nets.g, nets.f)
        )
        assert float(total) == pytest.approx(float(manual), rel=1e-6)

    def test_zero_cycle_weights_reduce_to_lsgan_pair(self):
        nets = small_bundle(2)
        x, y = rand_batch(9)
        weights = LossWeights(cycle=0.0, identity=0.0)
        total, parts = generator_objective(TrainingMode.parse("cycle"), weights, (x, y), nets)
        expected = float(
            lsgan_generator_loss(nets.d_y(nets.g(x)))
            + lsgan_generator_loss(nets.d_x(nets.f(y)))
        )
        assert float(total) == pytest.approx(expected, rel=1e-6)
        assert float(parts["cycle"]) == 0.0 and float(parts["identity"]) == 0.0

    def test_dual_registration_symmetry(self):
        # swapping (x, G, R_Y, D_Y) with (y, F, R_X, D_X) on symmetric inputs
        # leaves the objective unchanged, exactly
        torch.manual_seed(3)
        g = ResidualGenerator(1, 4)
        f = ResidualGenerator(1, 4)
        f.load_state_dict(g.state_dict())
        d_y = PatchDiscriminator(2, 4)
        d_x = PatchDiscriminator(2, 4)
        d_x.load_state_dict(d_y.state_dict())
        r_y = RegistrationNetwork((4, 8))
        with torch.no_grad():
            r_y.final.weight.normal_(0, 0.01)
        r_x = RegistrationNetwork((4, 8))
        r_x.load_state_dict(r_y.state_dict())

        x, _ = rand_batch(10)
        y = x.clone()
        mode = TrainingMode.parse("cycle+r2+f_all")
        weights = LossWeights(mask_radius=3)
        nets = NetworkBundle(g=g, f=f, d_x=d_x, d_y=d_y, r_x=r_x, r_y=r_y)
        swapped = NetworkBundle(g=f, f=g, d_x=d_y, d_y=d_x, r_x=r_y, r_y=r_x)
        total, _ = generator_objective(mode, weights, (x, y), nets)
        total_swapped, _ = generator_objective(mode, weights, (y, x), swapped)
        assert float(total) == float(total_swapped)

    def test_frequency_uses_registered_image(self):
        # with a nonzero field the frequency term must score the warped image
        torch.manual_seed(4)
        nets = small_bundle(4)
        with torch.no_grad():
            nets.r_y.final.weight.normal_(0, 0.05)
            nets.r_y.final.bias.uniform_(-1.0, 1.0)
        x, y = rand_batch(11)
        mode = TrainingMode.parse("gan+r+f_low")
        weights = LossWeights(mask_radius=3)
        _, parts = generator_objective(mode, weights, (x, y), nets)

        with torch.no_grad():
            fake = nets.g(x)
            dvf = nets.r_y(fake, y)
            assert float(dvf.abs().max()) > 0.1
            warped = resample(fake, dvf.unsqueeze(1))
            mask = build_radial_mask(32, 32, 3)
            expected = weights.frequency * frequency_loss(warped, y, mask, 1.0)
            raw = weights.frequency * frequency_loss(fake, y, mask, 1.0)
        assert float(parts["freq_g"]) == pytest.approx(float(expected), rel=1e-6)
        assert float(parts["freq_g"]) != pytest.approx(float(raw), rel=1e-3)

    def test_precomputed_fakes_match_internal(self):
        nets = small_bundle(5)
        x, y = rand_batch(12)
        mode = TrainingMode.parse("cycle+r")
        weights = LossWeights(mask_radius=3)
        total_a, _ = generator_objective(mode, weights, (x, y), nets)
        total_b, _ = generator_objective(
            mode, weights, (x, y), nets, fake_y=nets.g(x), fake_x=nets.f(y)
        )
        assert float(total_a) == pytest.approx(float(total_b), rel=1e-7)

    def test_missing_network_diagnostic(self):
        nets = NetworkBundle(g=_Identity(), d_y=_Const(1.0))
        x, y = rand_batch(13)
        with pytest.raises(ValueError, match="r_y"):
            generator_objective(TrainingMode.parse("gan+r"), LossWeights(), (x, y), nets)
        with pytest.raises(ValueError, match="f, d_x"):
            generator_objective(TrainingMode.parse("cycle"), LossWeights(), (x, y), nets)


class TestDiscriminatorObjective:
    def test_perfect_separation_is_zero(self):
        x, y = rand_batch(14)

        class _Separator(nn.Module):
            def __init__(self, real):
                super().__init__()
                self.real = real

            def forward(self, t):
                value = 1.0 if torch.equal(t, self.real) else 0.0
                return torch.full_like(t, value)

        nets = NetworkBundle(g=_Identity(), d_y=_Separator(y))
        losses = discriminator_objective(TrainingMode.parse("gan"), (x, y), nets)
        assert float(losses["d_y"]) == 0.0

    def test_constant_half_scores(self):
        x, y = rand_batch(15)
        nets = NetworkBundle(g=_Identity(), d_y=_Const(0.5))
        losses = discriminator_objective(TrainingMode.parse("gan"), (x, y), nets)
        assert float(losses["d_y"]) == 0.5

    def test_cycle_mode_returns_two_losses(self):
        nets = small_bundle(6)
        x, y = rand_batch(16)
        losses = discriminator_objective(TrainingMode.parse("cycle"), (x, y), nets)
        assert sorted(losses) == ["d_x", "d_y"]

    def test_fakes_are_detached_from_generators(self):
        nets = small_bundle(7)
        x, y = rand_batch(17)
        for mode in (TrainingMode.parse("gan"), TrainingMode.parse("cycle")):
            nets.g.zero_grad(set_to_none=True)
            nets.f.zero_grad(set_to_none=True)
            losses = discriminator_objective(mode, (x, y), nets)
            sum(losses.values()).backward()
            assert all(p.grad is None for p in nets.g.parameters())
            assert all(p.grad is None for p in nets.f.parameters())

    def test_precomputed_fake_is_detached_too(self):
        nets = small_bundle(8)
        x, y = rand_batch(18)
        fake_y = nets.g(x)  # carries graph
        losses = discriminator_objective(TrainingMode.parse("gan"), (x, y), nets, fake_y=fake_y)
        sum(losses.values()).backward()
        assert all(p.grad is None for p in nets.g.parameters())
