import math

import numpy as np
import pytest
import torch

from oracles import constructed_pairs, reference_psnr, reference_ssim
from splatlift.metrics import border_crop, psnr, ssim, ssim_map, ssim_torch
from splatlift.render import FloatImage


class TestPSNR:
    def test_identical(self):
        a = np.random.default_rng(0).random((8, 8, 3))
        assert psnr(a, a) == math.inf

    def test_uniform_error(self):
        a = np.full((8, 8, 3), 0.5)
        assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)

    def test_errors_only_in_masked_out_half(self):
        a = np.zeros((8, 8, 3))
        b = a.copy()
        b[:, 4:] = 0.3
        m = np.zeros((8, 8))
        m[:, :4] = 1
        assert psnr(a, b, m) == math.inf
        assert math.isfinite(psnr(a, b))

    def test_empty_mask_is_undefined(self):
        a = np.zeros((4, 4, 3))
        assert psnr(a, a + 0.1, np.zeros((4, 4))) is None

    def test_all_ones_mask_exact(self):
        for a, b in constructed_pairs():
            assert psnr(a, b, np.ones(a.shape[:2])) == psnr(a, b)

    def test_symmetric(self):
        for a, b in constructed_pairs():
            assert psnr(a, b) == psnr(b, a)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))

    def test_monotone_in_noise(self):
        rng = np.random.default_rng(1)
        a = rng.random((32, 32, 3)) * 0.5 + 0.25
        noise = rng.uniform(-1, 1, a.shape)
        values = [psnr(a, a + s * noise) for s in (0.01, 0.02, 0.05, 0.1, 0.2)]
        assert all(x > y for x, y in zip(values, values[1:]))

    def test_matches_reference(self):
        rng = np.random.default_rng(2)
        for a, b in constructed_pairs():
            m = (rng.random(a.shape[:2]) > 0.3).astype(float)
            assert abs(psnr(a, b) - reference_psnr(a, b)) <= 1e-6
            assert abs(psnr(a, b, m) - reference_psnr(a, b, m)) <= 1e-6


class TestSSIM:
    def test_identical(self):
        a = np.random.default_rng(0).random((16, 16, 3))
        assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)

    def test_checkerboard_negative(self):
        yy, xx = np.mgrid[0:32, 0:32]
        a = ((xx + yy) % 2).astype(float)[:, :, None].repeat(3, axis=2)
        value = ssim(a, 1 - a)
        assert value < -0.99
        assert value == pytest.approx(reference_ssim(a, 1 - a), abs=1e-6)

    def test_constant_offset(self):
        a = np.full((24, 24, 3), 0.3)
        assert ssim(a, a + 0.1) == pytest.approx(reference_ssim(a, a + 0.1), abs=1e-6)

    def test_matches_reference(self):
        for a, b in constructed_pairs():
            assert abs(ssim(a, b) - reference_ssim(a, b)) <= 1e-6

    def test_symmetric(self):
        for a, b in constructed_pairs():
            assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-15)

    def test_too_small(self):
        with pytest.raises(ValueError, match="smaller"):
            ssim(np.zeros((10, 20, 3)), np.zeros((10, 20, 3)))

    def test_all_ones_mask_exact(self):
        for a, b in constructed_pairs():
            assert ssim(a, b, np.ones(a.shape[:2])) == ssim(a, b)

    def test_mask_selects_region(self):
        rng = np.random.default_rng(3)
        a = rng.random((40, 40, 3))
        b = a.copy()
        b[:, 20:] = rng.random((40, 20, 3))
        m = np.zeros((40, 40))
        m[:, :8] = 1
        # weights are the mask filtered by the window; windows touching col >= 20 get none
        assert ssim(a, b, m) == pytest.approx(1.0, abs=1e-12)
        assert ssim(a, b, np.zeros((40, 40))) is None

    def test_torch_matches_per_channel(self):
        rng = np.random.default_rng(4)
        a, b = rng.random((20, 24, 3)), rng.random((20, 24, 3))
        per_channel = np.mean([ssim_map(a[:, :, c:c + 1], b[:, :, c:c + 1]).mean() for c in range(3)])
        assert float(ssim_torch(torch.tensor(a), torch.tensor(b))) == pytest.approx(per_channel, abs=1e-12)


class TestBorderCrop:
    def test_hundred(self):
        assert border_crop(np.zeros((100, 100, 3))).shape == (90, 90, 3)

    def test_identity(self):
        a = np.random.default_rng(0).random((7, 9, 3))
        np.testing.assert_array_equal(border_crop(a, 0.0), a)

    def test_518(self):
        assert border_crop(np.zeros((518, 518, 3))).shape == (468, 468, 3)

    def test_float_image(self):
        out = border_crop(FloatImage(np.zeros((20, 40, 1)), "mask"), 0.1)
        assert out.semantics == "mask" and out.data.shape == (16, 32, 1)

    @pytest.mark.parametrize("fraction", [-0.1, 0.5, 0.7])
    def test_bad_fraction(self, fraction):
        with pytest.raises(ValueError):
            border_crop(np.zeros((10, 10, 3)), fraction)

    def test_empty_result(self):
        # fractions below one half never empty a nonempty image, so only a zero-area input gets here
        with pytest.raises(ValueError, match="empty"):
            border_crop(np.zeros((0, 10, 3)), 0.05)
