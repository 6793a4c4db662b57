import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import frangi_oracle, hessian_oracle
from ropscreen import io
from ropscreen.vesselness import (VesselnessConfig, VesselnessFilter, build_4channel, compute_vmap,
                                  hessian,
                                  frangi_vesselness, hessian_eigen)

BRIGHT = VesselnessConfig(scales=(2.0,), beta=0.5, dark_vessels=False)


def line_image(h=48, w=48, width=4, dark=False, col=24):
    img = np.zeros((h, w)) if not dark else np.ones((h, w))
    img[:, col - width // 2: col - width // 2 + width] = 0.0 if dark else 1.0
    return img


class TestHessian:
    def test_constant_image_has_zero_eigenvalues(self):
        eig = hessian_eigen(np.full((20, 20), 0.7), 2.0)
        np.testing.assert_allclose(eig.lambda1, 0.0, atol=1e-12)
        np.testing.assert_allclose(eig.lambda2, 0.0, atol=1e-12)

    def test_dark_line_has_positive_lambda2_on_axis(self):
        eig = hessian_eigen(line_image(dark=True), 2.0)
        assert np.all(eig.lambda2[8:40, 24] > 0)

    @pytest.mark.parametrize("sigma", [1.0, 2.0])
    def test_quadratic_surface(self, sigma):
        x = np.arange(64, dtype=float)
        img = np.tile((x - 32.0) ** 2, (64, 1))  # z = x^2 along columns
        eig = hessian_eigen(img, sigma)
        core = (slice(20, 44), slice(20, 44))
        np.testing.assert_allclose(eig.lambda1[core], 0.0, atol=1e-8)
        np.testing.assert_allclose(eig.lambda2[core], 2.0 * sigma ** 2, rtol=1e-6)

    def test_matches_explicit_kernel_oracle(self, rng):
        img = rng.random((30, 34))
        for ours, ref in zip(hessian(img, 1.5), hessian_oracle(img, 1.5)):
            np.testing.assert_allclose(ours, ref, atol=2e-3)
        eig = hessian_eigen(img, 1.5)
        hrr, hrc, hcc = hessian(img, 1.5)
        np.testing.assert_allclose(eig.lambda1 + eig.lambda2, hrr + hcc, atol=1e-12)
        np.testing.assert_allclose(eig.lambda1 * eig.lambda2, hrr * hcc - hrc ** 2, atol=1e-12)

    @settings(max_examples=15, deadline=None)
    @given(arrays(np.float64, (12, 12), elements=st.floats(0, 1)), st.sampled_from([0.8, 1.0, 2.5]))
    def test_sorted_by_magnitude(self, img, sigma):
        eig = hessian_eigen(img, sigma)
        assert np.all(np.abs(eig.lambda1) <= np.abs(eig.lambda2) + 1e-15)

    def test_sigma_must_be_positive(self):
        with pytest.raises(ValueError):
            hessian_eigen(np.zeros((5, 5)), 0.0)


class TestFrangi:
    def test_positive_lambda2_gives_zero(self, rng):
        img = rng.random((24, 24))
        cfg = VesselnessConfig(scales=(1.0, 2.0), dark_vessels=False)
        _, per_scale = frangi_vesselness(img, cfg, return_scales=True)
        for sigma, resp in zip(cfg.scales, per_scale):
            eig = hessian_eigen(img, sigma)
            assert np.all(resp[eig.lambda2 > 0] == 0.0)

    def test_constant_image_all_zero(self):
        assert np.all(frangi_vesselness(np.full((16, 16), 0.3)).values == 0.0)

    def test_straight_vessel_matches_oracle_and_peaks_on_axis(self):
        img = line_image(width=4)  # width 2 * sigma for sigma = 2
        ours = frangi_vesselness(img, BRIGHT).values
        oracle = frangi_oracle(img, 2.0, beta=0.5)
        np.testing.assert_allclose(ours, oracle, atol=5e-3)
        axis = 23
        for y in range(10, 38):
            for field in (ours, oracle):
                assert field[y, axis] > field[y, axis + 8]
                assert field[y, axis] > field[y, axis - 8]

    def test_polarity(self):
        bright = frangi_vesselness(line_image(width=4), BRIGHT).values
        dark_as_bright = frangi_vesselness(line_image(width=4, dark=True), BRIGHT).values
        assert bright[24, 23] > 0.1
        assert dark_as_bright[10:38, 22:25].max() == 0.0
        inverted = frangi_vesselness(line_image(width=4, dark=True),
                                     VesselnessConfig(scales=(2.0,), dark_vessels=True)).values
        np.testing.assert_allclose(inverted, bright, atol=1e-12)

    @settings(max_examples=15, deadline=None)
    @given(arrays(np.float64, (14, 18), elements=st.floats(0, 1)), st.integers(1, 3))
    def test_rotation_equivariance(self, img, k):
        cfg = VesselnessConfig(scales=(1.0, 2.0))
        a = np.rot90(frangi_vesselness(img, cfg).values, k)
        b = frangi_vesselness(np.ascontiguousarray(np.rot90(img, k)), cfg).values
        np.testing.assert_allclose(a, b, atol=1e-12)

    @settings(max_examples=15, deadline=None)
    @given(arrays(np.float64, (16, 16), elements=st.floats(0, 1)))
    def test_scale_max_and_bounds(self, img):
        vm, per_scale = frangi_vesselness(img, VesselnessConfig(scales=(1.0, 2.0, 3.0)), return_scales=True)
        assert vm.values.min() >= 0.0 and vm.values.max() <= 1.0
        for resp in per_scale:
            assert np.all(vm.values >= resp)
            assert resp.min() >= 0.0 and resp.max() <= 1.0

    def test_adaptive_c_recorded_and_fixed_c_used(self, rng):
        img = rng.random((20, 20))
        vm = frangi_vesselness(img, VesselnessConfig(scales=(1.0, 2.0)))
        assert len(vm.c_values) == 2 and all(c > 0 for c in vm.c_values)
        fixed = frangi_vesselness(img, VesselnessConfig(scales=(1.0, 2.0), c=0.25))
        assert fixed.c_values == [0.25, 0.25]

    @pytest.mark.parametrize("kw", [dict(scales=()), dict(scales=(0.0,)), dict(beta=0.0), dict(c=-1.0)])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            VesselnessConfig(**kw)


class TestFourChannel:
    def test_shape_and_pass_through(self, rng):
        rgb = rng.random((3, 224, 224)).astype(np.float32)
        vmap = rng.random((224, 224)).astype(np.float32)
        out = build_4channel(rgb, vmap)
        assert out.shape == (4, 224, 224)
        np.testing.assert_array_equal(out[3], vmap)
        np.testing.assert_array_equal(out[:3], rgb)

    def test_mismatch(self):
        with pytest.raises(ValueError):
            build_4channel(np.zeros((3, 8, 8)), np.zeros((8, 9)))
        with pytest.raises(ValueError):
            build_4channel(np.zeros((4, 8, 8)), np.zeros((8, 8)))


def test_vmap_zero_outside_aperture_and_16bit_round_trip(tmp_path, rng):
    rgb = np.zeros((64, 64, 3))
    yy, xx = np.mgrid[:64, :64]
    inside = (yy - 32) ** 2 + (xx - 32) ** 2 < 28 ** 2
    rgb[inside] = 0.6
    rgb[inside & (np.abs(xx - 32) < 2)] = 0.2
    vm = compute_vmap(rgb, VesselnessConfig(scales=(1.0, 2.0)))
    assert np.all(vm.values[~inside] == 0.0)
    assert vm.values[32, 32] > 0.1
    io.write_map16(tmp_path / "m.png", vm.values)
    back = io.read_map16(tmp_path / "m.png")
    np.testing.assert_array_equal(back, io.quantize16(vm.values))
    io.write_map16(tmp_path / "m2.png", back)
    np.testing.assert_array_equal(io.read_map16(tmp_path / "m2.png"), back)


def test_filter_transformer(rng):
    X = rng.random((2, 20, 20, 3))
    out = VesselnessFilter(scales=(1.0,)).fit(X).transform(X)
    assert out.shape == (2, 20, 20)
