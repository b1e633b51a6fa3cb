"""Luma-space metric tests against closed forms and a reference recomputation."""

import numpy as np
import pytest

from mgsr.metrics import PSNR_CAP, psnr_y, rgb_to_ycbcr, ssim_y
from mgsr.tensor import Rng


class TestYCbCr:
    def test_white_luma(self):
        img = np.ones((3, 4, 4))
        assert abs(rgb_to_ycbcr(img)[0].mean() - 1.0) < 1e-9

    def test_black(self):
        out = rgb_to_ycbcr(np.zeros((3, 4, 4)))
        assert np.allclose(out[0], 0.0)
        assert np.allclose(out[1], 0.5) and np.allclose(out[2], 0.5)

    def test_pure_red(self):
        img = np.zeros((3, 2, 2))
        img[0] = 1.0
        assert abs(rgb_to_ycbcr(img)[0, 0, 0] - 0.299) < 1e-12


class TestPsnr:
    def test_identity_capped(self):
        img = Rng(1).uniform((3, 16, 16))
        assert psnr_y(img, img) == PSNR_CAP

    def test_uniform_offset_exact_20db(self):
        a = Rng(2).uniform((3, 16, 16)) * 0.8
        b = a + 0.1
        assert abs(psnr_y(a, b) - 20.0) < 1e-6

    def test_matches_reference_formula(self):
        rng = Rng(3)
        a = rng.uniform((3, 12, 12))
        b = rng.uniform((3, 12, 12))
        w = np.array([0.299, 0.587, 0.114])
        ya = np.einsum("c,chw->hw", w, a)
        yb = np.einsum("c,chw->hw", w, b)
        want = 10 * np.log10(1.0 / np.mean((ya - yb) ** 2))
        assert abs(psnr_y(a, b) - want) < 1e-9

    def test_symmetric(self):
        rng = Rng(4)
        a, b = rng.uniform((3, 12, 12)), rng.uniform((3, 12, 12))
        assert psnr_y(a, b) == psnr_y(b, a)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="mismatch"):
            psnr_y(np.zeros((3, 8, 8)), np.zeros((3, 9, 8)))


class TestSsim:
    def test_identity(self):
        img = Rng(5).uniform((3, 16, 16))
        assert abs(ssim_y(img, img) - 1.0) < 1e-9

    def test_constant_images_closed_form(self):
        a = np.full((3, 16, 16), 0.5)
        b = np.full((3, 16, 16), 0.25)
        c1, c2 = 0.01 ** 2, 0.03 ** 2
        want = ((2 * 0.5 * 0.25 + c1) * c2) / ((0.5 ** 2 + 0.25 ** 2 + c1) * c2)
        got = ssim_y(a, b)
        assert abs(got - want) < 1e-12
        assert abs(got - 0.800063979526552) < 1e-12  # frozen closed form

    def test_symmetric(self):
        rng = Rng(6)
        a, b = rng.uniform((3, 16, 16)), rng.uniform((3, 16, 16))
        assert abs(ssim_y(a, b) - ssim_y(b, a)) < 1e-9

    def test_too_small_rejected(self):
        with pytest.raises(ValueError, match="smaller than"):
            ssim_y(np.zeros((3, 8, 8)), np.zeros((3, 8, 8)))

    def test_degradation_lowers_score(self):
        from mgsr import data
        p = data.make_scene_pair(17)
        up = data.bicubic_upsample(p.lr)
        assert ssim_y(up, p.hr) < 0.95
        assert -1.0 <= ssim_y(up, p.hr) <= 1.0
