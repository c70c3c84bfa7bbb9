from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import area_loss_sorted, blur_dense

from fep.models import finite_difference_oracle
from fep.perturb import (AreaConfig, BlurKernel, MaskParams, area_loss, area_loss_grad, blend, expand_mask,
                         gaussian_blur, perturb, pullback_mask_grad)
from fep.tensor import ShapeError


class TestBlurKernel:
    @pytest.mark.parametrize("sigma", [0.3, 1.0, 2.0, 3.7])
    def test_normalized(self, sigma):
        k = BlurKernel(sigma)
        assert k.radius == int(np.ceil(3 * sigma))
        assert k.weights.size == 2 * k.radius + 1
        assert k.weights.sum() == pytest.approx(1.0, abs=1e-12)

    def test_rejects_non_positive(self):
        with pytest.raises(ValueError):
            BlurKernel(0.0)


class TestGaussianBlur:
    def test_constant_fixed_point(self):
        clip = np.full((2, 3, 8, 9), 1.7)
        np.testing.assert_allclose(gaussian_blur(clip, BlurKernel(2.0)), clip, atol=1e-14)

    def test_center_weight_of_impulse(self):
        clip = np.zeros((1, 1, 15, 15))
        clip[0, 0, 7, 7] = 1.0
        k = BlurKernel(1.0)
        centre = k.weights[k.radius]
        assert gaussian_blur(clip, k)[0, 0, 7, 7] == pytest.approx(centre * centre, abs=1e-15)

    def test_matches_dense_oracle(self, rng):
        clip = rng.normal(size=(2, 2, 9, 11))
        out = gaussian_blur(clip, BlurKernel(1.3))
        for t in range(2):
            for c in range(2):
                np.testing.assert_allclose(out[t, c], blur_dense(clip[t, c], 1.3), atol=1e-12)

    def test_mass_preserved(self, rng):
        clip = rng.random((3, 1, 10, 12))
        out = gaussian_blur(clip, BlurKernel(2.0))
        np.testing.assert_allclose(out.sum(axis=(2, 3)), clip.sum(axis=(2, 3)), atol=1e-10)

    def test_large_kernel_on_small_frame(self, rng):
        clip = rng.random((1, 1, 3, 4))
        np.testing.assert_allclose(gaussian_blur(clip, BlurKernel(4.0))[0, 0], blur_dense(clip[0, 0], 4.0),
                                   atol=1e-12)

    def test_commutes_with_transpose(self, rng):
        clip = rng.normal(size=(2, 1, 10, 10))
        k = BlurKernel(1.5)
        np.testing.assert_allclose(gaussian_blur(clip.transpose(0, 1, 3, 2), k),
                                   gaussian_blur(clip, k).transpose(0, 1, 3, 2), atol=1e-12)


class TestExpandMask:
    def test_saturation(self):
        p = MaskParams(np.full((2, 1, 8, 8), 20.0), 2, 3.0)
        assert expand_mask(p, (2, 16, 16)).min() >= 0.999

    def test_zero_grid_is_half(self):
        p = MaskParams(np.zeros((2, 1, 6, 6)), 3, 4.0)
        m = expand_mask(p, (2, 16, 17 - 1))
        np.testing.assert_array_equal(m, 0.5)

    def test_constant_helper(self):
        p = MaskParams.constant((3, 16, 16), 2, 3.0, 0.3)
        np.testing.assert_allclose(expand_mask(p, (3, 16, 16)), 0.3, atol=1e-15)

    def test_identity_limit(self, rng):
        grid = rng.normal(size=(3, 1, 5, 7))
        m = expand_mask(MaskParams(grid, 1, 0.0), (3, 5, 7))
        np.testing.assert_allclose(m, 1 / (1 + np.exp(-grid)), atol=1e-12)

    def test_small_sigma_approaches_identity(self, rng):
        grid = rng.normal(size=(2, 1, 6, 6))
        m = expand_mask(MaskParams(grid, 1, 0.05), (2, 6, 6))
        np.testing.assert_allclose(m, 1 / (1 + np.exp(-grid)), atol=1e-12)

    def test_range_and_shape(self, rng):
        grid = 10 * rng.normal(size=(4, 1, 3, 3))
        m = expand_mask(MaskParams(grid, 5, 4.0), (4, 13, 11))
        assert m.shape == (4, 1, 13, 11)
        assert m.min() >= 0 and m.max() <= 1

    def test_grid_dims_checked(self):
        with pytest.raises(ShapeError):
            expand_mask(MaskParams(np.zeros((2, 1, 3, 3)), 2, 1.0), (2, 8, 8))

    def test_grid_dims(self):
        assert MaskParams.grid_dims(16, 16, 2) == (8, 8)
        assert MaskParams.grid_dims(112, 112, 13) == (9, 9)

    def test_pullback_matches_finite_differences(self, rng):
        grid = rng.normal(size=(2, 1, 4, 4))
        full = (2, 7, 8)
        w = rng.normal(size=full)

        def f(gr):
            return float(np.sum(w * expand_mask(MaskParams(gr, 2, 1.5), full)[:, 0]))

        analytic = pullback_mask_grad(MaskParams(grid, 2, 1.5), w)
        numeric = finite_difference_oracle(f, grid, 1e-6)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-9)


class TestPerturb:
    def test_ones_is_identity(self, rng):
        clip = rng.normal(size=(3, 2, 8, 8))
        out = perturb(clip, np.ones((3, 1, 8, 8)), BlurKernel(2.0))
        assert out.tobytes() == clip.tobytes()

    def test_zeros_is_blur(self, rng):
        clip = rng.normal(size=(3, 2, 8, 8))
        k = BlurKernel(2.0)
        np.testing.assert_array_equal(perturb(clip, np.zeros((3, 1, 8, 8)), k), gaussian_blur(clip, k))

    def test_half_is_midpoint(self, rng):
        clip = rng.normal(size=(3, 2, 8, 8))
        k = BlurKernel(2.0)
        np.testing.assert_allclose(perturb(clip, np.full((3, 1, 8, 8), 0.5), k),
                                   0.5 * (clip + gaussian_blur(clip, k)), atol=1e-12)

    def test_affine_in_mask(self, rng):
        clip = rng.normal(size=(2, 1, 6, 6))
        m1, m2 = rng.random((2, 2, 1, 6, 6))
        k, a = BlurKernel(1.0), 0.3
        np.testing.assert_allclose(perturb(clip, a * m1 + (1 - a) * m2, k),
                                   a * perturb(clip, m1, k) + (1 - a) * perturb(clip, m2, k), atol=1e-12)

    def test_shape_mismatch(self, rng):
        clip = rng.normal(size=(2, 1, 6, 6))
        with pytest.raises(ShapeError):
            blend(clip, clip, np.ones((2, 1, 5, 6)))


class TestAreaLoss:
    def test_hand_example(self):
        m = np.array([0.9, 0.1, 0.5])
        cfg = AreaConfig(1 / 3, 1.0)
        assert area_loss(m, cfg) == pytest.approx(0.27, abs=1e-12)
        np.testing.assert_allclose(area_loss_grad(m, cfg), [-0.2, 0.2, 1.0], atol=1e-12)

    def test_zero_at_template(self):
        m = np.zeros((2, 1, 5, 5))
        m.ravel()[[3, 17, 40, 41, 9]] = 1.0
        cfg = AreaConfig(0.1, 1.0)
        assert area_loss(m, cfg) == 0.0
        np.testing.assert_array_equal(area_loss_grad(m, cfg), 0.0)

    def test_sort_oracle(self, rng):
        m = rng.random((4, 1, 6, 6))
        assert area_loss(m, AreaConfig(0.23, 1.0)) == pytest.approx(area_loss_sorted(m, 0.23), abs=1e-12)

    def test_permutation_invariant(self, rng):
        m = rng.random(50)
        cfg = AreaConfig(0.2, 1.0)
        assert area_loss(rng.permutation(m), cfg) == pytest.approx(area_loss(m, cfg), abs=1e-12)

    def test_ties_break_by_flat_index(self):
        g = area_loss_grad(np.full(4, 0.5), AreaConfig(0.5, 1.0))
        np.testing.assert_allclose(g, [-1.0, -1.0, 1.0, 1.0])

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.05, 0.95))
    def test_finite_differences(self, seed, a):
        r = np.random.default_rng(seed)
        # distinct, well separated entries keep the sorted order locally stable
        m = (r.permutation(36) + r.uniform(0.2, 0.8, 36)) / 37.0
        cfg = AreaConfig(a, 1.0)
        numeric = finite_difference_oracle(lambda x: area_loss(x, cfg), m, 1e-6)
        analytic = area_loss_grad(m, cfg)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-8)

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            AreaConfig(1.0, 0.1)
        with pytest.raises(ValueError):
            AreaConfig(0.1, -1.0)
