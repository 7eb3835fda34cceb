import numpy as np
import pytest
import torch

from freqreg.registration import (
    RegistrationNetwork,
    correction_loss,
    estimate_dvf,
    resample,
    smoothness_loss,
)

from helpers import (
    fd_gradient,
    overfit_shift_experiment,
    relative_error,
    shift_columns,
    smooth_test_image,
)


def rand_img(seed, h=5, w=7, dtype=torch.float64):
    rng = np.random.default_rng(seed)
    return torch.from_numpy(rng.random((h, w))).to(dtype)


class TestResample:
    @pytest.mark.parametrize("dtype", [torch.float32, torch.float64])
    def test_zero_field_is_identity_bit_exact(self, dtype):
        img = rand_img(0, dtype=dtype)
        out = resample(img, torch.zeros(5, 7, 2, dtype=dtype))
        assert torch.equal(out, img)

    @pytest.mark.parametrize("shift", [1, 2, -1, -3])
    def test_constant_integer_x_shift(self, shift):
        img = rand_img(1)
        dvf = torch.zeros(5, 7, 2, dtype=torch.float64)
        dvf[..., 1] = shift
        out = resample(img, dvf).numpy()
        # sampling at column j+shift means content moves by -shift
        expected = shift_columns(img.numpy(), -shift)
        assert np.array_equal(out, expected)

    def test_random_integer_field_matches_gather_oracle(self):
        rng = np.random.default_rng(2)
        img = rng.random((6, 8))
        field = rng.integers(-3, 4, size=(6, 8, 2)).astype(np.float64)
        out = resample(torch.from_numpy(img), torch.from_numpy(field)).numpy()
        expected = np.empty_like(img)
        for i in range(6):
            for j in range(8):
                yi = int(np.clip(i + field[i, j, 0], 0, 5))
                xi = int(np.clip(j + field[i, j, 1], 0, 7))
                expected[i, j] = img[yi, xi]
        assert np.array_equal(out, expected)

    def test_half_pixel_shift_averages_neighbors(self):
        img = rand_img(3)
        dvf = torch.zeros(5, 7, 2, dtype=torch.float64)
        dvf[..., 1] = 0.5
        out = resample(img, dvf).numpy()
        a = img.numpy()
        assert np.allclose(out[:, :-1], 0.5 * (a[:, :-1] + a[:, 1:]), atol=1e-15)
        assert np.array_equal(out[:, -1], a[:, -1])

    def test_batched_matches_per_sample(self):
        rng = np.random.default_rng(4)
        imgs = torch.from_numpy(rng.random((3, 6, 6)))
        fields = torch.from_numpy(rng.uniform(-2, 2, size=(3, 6, 6, 2)))
        batched = resample(imgs, fields)
        for k in range(3):
            assert torch.equal(batched[k], resample(imgs[k], fields[k]))

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValueError, match="match"):
            resample(torch.rand(5, 7), torch.rand(5, 6, 2))
        with pytest.raises(ValueError, match="components"):
            resample(torch.rand(5, 7), torch.rand(5, 7, 3))

    def test_rejects_non_finite_field(self):
        dvf = torch.zeros(5, 7, 2)
        dvf[0, 0, 0] = float("inf")
        with pytest.raises(ValueError, match="non-finite"):
            resample(torch.rand(5, 7), dvf)


class TestSmoothnessLoss:
    def test_constant_field_is_zero(self):
        for value in (0.0, 1.5, -2.25):
            dvf = torch.full((6, 6, 2), value, dtype=torch.float64)
            assert float(smoothness_loss(dvf)) == 0.0

    def test_unit_ramp_golden_value(self):
        # brute-force forward differences on a 4x4 field with dx[i, j] = j
        dvf = torch.zeros(4, 4, 2, dtype=torch.float64)
        dvf[..., 1] = torch.arange(4, dtype=torch.float64).unsqueeze(0)
        field = dvf.numpy()
        sq_sum, count = 0.0, 0
        for comp in range(2):
            for i in range(4):
                for j in range(4):
                    if i + 1 < 4:
                        sq_sum += (field[i + 1, j, comp] - field[i, j, comp]) ** 2
                        count += 1
                    if j + 1 < 4:
                        sq_sum += (field[i, j + 1, comp] - field[i, j, comp]) ** 2
                        count += 1
        expected = sq_sum / count
        assert expected == 0.25
        assert float(smoothness_loss(dvf)) == pytest.approx(expected, abs=1e-15)

    def test_invariant_to_constant_offset(self):
        rng = np.random.default_rng(5)
        dvf = torch.from_numpy(rng.uniform(-1, 1, size=(8, 8, 2)))
        shifted = dvf + torch.tensor([3.5, -1.25], dtype=torch.float64)
        assert float(smoothness_loss(dvf)) == pytest.approx(
            float(smoothness_loss(shifted)), rel=1e-12
        )


class TestCorrectionLoss:
    def test_identical_zero_field(self):
        img = rand_img(6)
        assert float(correction_loss(img, img, torch.zeros(5, 7, 2, dtype=torch.float64))) == 0.0

    def test_constant_offset(self):
        tgt = rand_img(7) * 0.5
        gen = tgt + 0.1
        loss = correction_loss(gen, tgt, torch.zeros(5, 7, 2, dtype=torch.float64))
        assert float(loss) == pytest.approx(0.1, rel=1e-12)

    def test_shift_cancellation_except_border(self):
        tgt = rand_img(8).numpy()
        gen = shift_columns(tgt, 1)  # content moved right by one column
        dvf = torch.zeros(5, 7, 2, dtype=torch.float64)
        dvf[..., 1] = 1.0  # sample one column to the right again
        warped = resample(torch.from_numpy(gen), dvf).numpy()
        assert np.array_equal(warped[:, :-1], tgt[:, :-1])

    def test_decomposition_identity(self):
        rng = np.random.default_rng(9)
        gen = torch.from_numpy(rng.random((8, 8)))
        tgt = torch.from_numpy(rng.random((8, 8)))
        dvf = torch.from_numpy(rng.uniform(-2, 2, size=(8, 8, 2)))
        direct = float(correction_loss(gen, tgt, dvf))
        composed = float((resample(gen, dvf) - tgt).abs().mean())
        assert direct == composed

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValueError, match="shapes differ"):
            correction_loss(torch.rand(5, 7), torch.rand(5, 6), torch.zeros(5, 7, 2))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(11)
        gen0 = torch.from_numpy(rng.random((16, 16)))
        tgt = torch.from_numpy(rng.random((16, 16)))

        # construct sample coordinates strictly inside bilinear cells (and
        # away from the border clamp) so the finite-difference step cannot
        # cross a non-differentiable point of the warp
        cells_y = np.clip(np.arange(16)[:, None] + rng.integers(-2, 3, (16, 16)), 0, 14)
        cells_x = np.clip(np.arange(16)[None, :] + rng.integers(-2, 3, (16, 16)), 0, 14)
        coords_y = cells_y + rng.uniform(0.25, 0.75, (16, 16))
        coords_x = cells_x + rng.uniform(0.25, 0.75, (16, 16))
        dvf0 = torch.from_numpy(
            np.stack([coords_y - np.arange(16)[:, None], coords_x - np.arange(16)[None, :]], -1)
        )

        gen = gen0.clone().requires_grad_(True)
        dvf = dvf0.clone().requires_grad_(True)
        loss = correction_loss(gen, tgt, dvf)
        loss.backward()

        numeric_gen = fd_gradient(lambda v: correction_loss(v, tgt, dvf0), gen0.clone())
        assert float(relative_error(gen.grad, numeric_gen).max()) < 1e-3

        numeric_dvf = fd_gradient(lambda v: correction_loss(gen0, tgt, v), dvf0.clone())
        assert float(relative_error(dvf.grad, numeric_dvf).max()) < 1e-3


class TestRegistrationNetwork:
    def test_zero_initialized_field(self):
        torch.manual_seed(0)
        net = RegistrationNetwork((8, 16, 16, 16))
        moving, fixed = torch.rand(2, 1, 64, 64), torch.rand(2, 1, 64, 64)
        field = net(moving, fixed)
        assert field.shape == (2, 64, 64, 2)
        assert float(field.abs().max()) == 0.0

    def test_estimate_dvf_shapes(self):
        net = RegistrationNetwork((8, 16))
        single = estimate_dvf(torch.rand(64, 64), torch.rand(64, 64), net)
        assert single.shape == (64, 64, 2)
        batched = estimate_dvf(torch.rand(3, 1, 64, 64), torch.rand(3, 1, 64, 64), net)
        assert batched.shape == (3, 64, 64, 2)

    def test_rejects_shape_mismatch(self):
        net = RegistrationNetwork((8, 16))
        with pytest.raises(ValueError, match="differ"):
            estimate_dvf(torch.rand(64, 64), torch.rand(32, 32), net)

    def test_rejects_indivisible_size(self):
        net = RegistrationNetwork((8, 16, 16, 16))
        with pytest.raises(ValueError, match="divisible"):
            net(torch.rand(1, 1, 60, 60), torch.rand(1, 1, 60, 60))

    def test_differentiable_wrt_moving(self):
        torch.manual_seed(1)
        net = RegistrationNetwork((4, 8))
        # perturb the zero-initialized final layer so the field is nontrivial
        with torch.no_grad():
            net.final.weight.normal_(0, 0.01)
        moving = torch.rand(1, 1, 32, 32, requires_grad=True)
        fixed = torch.rand(1, 1, 32, 32)
        net(moving, fixed).sum().backward()
        assert moving.grad is not None
        assert torch.isfinite(moving.grad).all()

    def test_single_pair_overfit_recovers_shift(self):
        mae = overfit_shift_experiment(shift_px=3, steps=500)
        assert mae < 0.02


class TestWarpSmoothImages:
    def test_round_trip_shift_on_smooth_image(self):
        img = torch.from_numpy(smooth_test_image(3))
        dvf = torch.zeros(64, 64, 2, dtype=torch.float64)
        dvf[..., 1] = 1.7
        back = dvf.clone()
        back[..., 1] = -1.7
        round_trip = resample(resample(img, dvf), back)
        err = float((round_trip - img).abs()[:, 4:-4].mean())
        assert err < 0.01
