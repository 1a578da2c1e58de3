import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from guidedsr.degradation import (
    DegradationSpec, blur, blur_adjoint, degrade, downsample, gaussian_kernel, measure_fwhm,
    sigma_for_cascade_stage, sigma_for_test_degradation, upsample,
)
from guidedsr.errors import DomainError


def smooth_image(n=16, seed=0):
    r = np.random.default_rng(seed)
    y, x = np.mgrid[0:n, 0:n] / n
    img = np.zeros((n, n))
    for _ in range(3):
        fx, fy, ph = r.uniform(0.2, 1.0), r.uniform(0.2, 1.0), r.uniform(0, 2 * np.pi)
        img += np.sin(2 * np.pi * (fx * x + fy * y) + ph)
    return img


# --- sigma rules ------------------------------------------------------------

def test_test_sigma_values():
    assert sigma_for_test_degradation(2) == pytest.approx(0.84932, abs=1e-5)
    assert sigma_for_test_degradation(4) == pytest.approx(1.69864, abs=1e-5)


@pytest.mark.parametrize("s", [1.5, 2, 3, 4])
def test_test_sigma_fwhm_inverse(s):
    sigma = sigma_for_test_degradation(s)
    assert sigma * 2 * math.sqrt(2 * math.log(2)) == pytest.approx(s, abs=1e-9)


@pytest.mark.parametrize("s", [1.0, 0.5, -2])
def test_test_sigma_domain(s):
    with pytest.raises(DomainError):
        sigma_for_test_degradation(s)


def test_cascade_sigma():
    assert sigma_for_cascade_stage(2 ** (1 / 3), 2) == pytest.approx(0.37833, abs=1e-5)
    assert sigma_for_cascade_stage(1.7, 1) == pytest.approx(sigma_for_test_degradation(1.7), rel=1e-12)
    sigmas = [sigma_for_cascade_stage(1.5, lam) for lam in (0.5, 1, 2, 4, 8)]
    assert all(a > b for a, b in zip(sigmas, sigmas[1:]))
    with pytest.raises(DomainError):
        sigma_for_cascade_stage(1.5, 0)
    with pytest.raises(DomainError):
        sigma_for_cascade_stage(1.0, 2)


# --- kernels ----------------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(sigma=st.floats(0.05, 5.0))
def test_kernel_normalised_symmetric_nonnegative(sigma):
    k = gaussian_kernel(sigma).taps
    assert abs(k.sum() - 1) < 1e-6
    assert np.all(k >= 0)
    np.testing.assert_allclose(k, k[::-1, :])
    np.testing.assert_allclose(k, k[:, ::-1])
    np.testing.assert_allclose(k, k.T)
    assert gaussian_kernel(sigma).radius >= math.ceil(3 * sigma)


def test_kernel_near_delta():
    assert gaussian_kernel(0.01, 2).taps[2, 2] > 0.999


def test_kernel_matches_closed_form():
    k = gaussian_kernel(1.0, 3).taps
    ref = np.zeros((7, 7))
    for i in range(7):
        for j in range(7):
            ref[i, j] = math.exp(-((i - 3) ** 2 + (j - 3) ** 2) / 2.0)
    ref /= ref.sum()
    np.testing.assert_allclose(k, ref, atol=1e-6)


@pytest.mark.parametrize("s", [2, 4])
def test_kernel_fwhm_equals_scale(s):
    assert measure_fwhm(gaussian_kernel(sigma_for_test_degradation(s))) == pytest.approx(s, abs=1.0)


# --- blur and adjoint -------------------------------------------------------

def test_blur_constant_preserved():
    np.testing.assert_allclose(blur(np.full((10, 12), 7.0), gaussian_kernel(1.3)), 7.0, rtol=1e-12)


def test_blur_delta_imprint():
    k = gaussian_kernel(1.0)
    img = np.zeros((15, 15))
    img[7, 7] = 1
    out = blur(img, k)
    r = k.radius
    np.testing.assert_allclose(out[7 - r:7 + r + 1, 7 - r:7 + r + 1], k.taps, atol=1e-15)


def test_blur_matches_scipy_reflect():
    img = smooth_image(16) + np.random.default_rng(3).random((16, 16))
    k = gaussian_kernel(1.2)
    np.testing.assert_allclose(blur(img, k), ndimage.correlate(img, k.taps, mode="reflect"), atol=1e-12)


def test_blur_mean_preserved_on_16x16():
    # mirror borders with a unit-sum symmetric kernel keep the total mass only
    # approximately in general; for this brute-force check use a symmetric image
    img = np.random.default_rng(0).random((16, 16))
    img = img + img[::-1, :] + img[:, ::-1] + img[::-1, ::-1]
    out = blur(img, gaussian_kernel(1.0))
    total = 0.0
    for i in range(16):
        for j in range(16):
            total += out[i, j]
    assert total / 256 == pytest.approx(img.mean(), abs=1e-5)


def test_adjoint_equals_blur_on_interior():
    k = gaussian_kernel(1.0)
    img = np.random.default_rng(1).random((20, 20))
    r = k.radius
    a, b = blur(img, k), blur_adjoint(img, k)
    np.testing.assert_allclose(a[2 * r:-2 * r, 2 * r:-2 * r], b[2 * r:-2 * r, 2 * r:-2 * r], atol=1e-12)


def test_adjoint_delta_imprint():
    k = gaussian_kernel(0.8)
    img = np.zeros((15, 15))
    img[7, 7] = 1
    r = k.radius
    np.testing.assert_allclose(blur_adjoint(img, k)[7 - r:7 + r + 1, 7 - r:7 + r + 1], k.taps[::-1, ::-1])


@pytest.mark.parametrize("sigma", [0.38, 0.85, 1.7, 4.0])
def test_adjoint_inner_product(sigma):
    k = gaussian_kernel(sigma)
    r = np.random.default_rng(int(sigma * 100))
    for _ in range(20):
        x, y = r.standard_normal((12, 12)), r.standard_normal((12, 12))
        lhs, rhs = np.sum(blur(x, k) * y), np.sum(x * blur_adjoint(y, k))
        assert abs(lhs - rhs) <= 1e-4 * max(abs(lhs), 1e-12)


# --- sampling ---------------------------------------------------------------

def test_downsample_constant():
    np.testing.assert_array_equal(downsample(np.full((8, 8), 3.0), 2), np.full((4, 4), 3.0))


def test_downsample_checkerboard_aliases():
    board = np.indices((8, 8)).sum(axis=0) % 2
    out = downsample(board.astype(float), 2)
    np.testing.assert_array_equal(out, np.zeros((4, 4)))


def test_downsample_ramp_samples():
    ramp = np.tile(np.arange(12, dtype=float), (12, 1))
    out = downsample(ramp, 3)
    np.testing.assert_array_equal(out[0], [0, 3, 6, 9])
    assert out[0, 0] == ramp[0, 0] and out[0, -1] == ramp[0, 9]


def test_downsample_fractional_extent():
    out = downsample(np.ones((81, 81)), 2 ** (1 / 3))
    assert out.shape == (64, 64)
    np.testing.assert_allclose(out, 1.0)


def test_downsample_too_small():
    with pytest.raises(DomainError):
        downsample(np.ones((6, 6)), 2)


def test_upsample_constant():
    out = upsample(np.full((5, 7), 2.5), 2)
    assert out.shape == (10, 14)
    np.testing.assert_allclose(out, 2.5, rtol=1e-12)


def test_upsample_linear_ramp_interior():
    y, x = np.mgrid[0:12, 0:12].astype(float)
    ramp = 0.5 * x - 0.25 * y + 3
    out = upsample(ramp, 2)
    yy, xx = np.mgrid[0:24, 0:24] / 2.0
    expect = 0.5 * xx - 0.25 * yy + 3
    np.testing.assert_allclose(out[4:-4, 4:-4], expect[4:-4, 4:-4], atol=1e-4)


def test_round_trip_on_smooth_image():
    x = smooth_image(16)
    back = downsample(upsample(x, 2), 2)
    assert np.sqrt(np.mean((back - x) ** 2)) < 0.02


# --- composite --------------------------------------------------------------

def test_degrade_constant_and_shape():
    spec = DegradationSpec.for_test(2)
    out = degrade(np.full((16, 20), 4.0), spec)
    assert out.shape == (8, 10)
    np.testing.assert_allclose(out, 4.0, rtol=1e-12)


def test_degrade_fractional_extents():
    spec = DegradationSpec.for_cascade_stage(2 ** (1 / 3))
    assert degrade(np.ones((64, 50)), spec).shape == (round(64 / 2 ** (1 / 3)), round(50 / 2 ** (1 / 3)))


def test_degrade_linear_in_intensity():
    x = np.random.default_rng(2).random((16, 16))
    spec = DegradationSpec.for_test(2)
    np.testing.assert_allclose(degrade(3.5 * x, spec), 3.5 * degrade(x, spec), rtol=1e-12)


def test_degrade_twice_matches_composed_blur():
    x = smooth_image(32, seed=4)
    s1 = DegradationSpec.for_test(2)
    twice = degrade(degrade(x, s1), s1)
    sigma_eff = math.sqrt(s1.sigma ** 2 + (s1.sigma * 2) ** 2)
    once = downsample(blur(x, gaussian_kernel(sigma_eff)), 4)
    assert np.sqrt(np.mean((twice - once) ** 2)) < 0.03


def test_spec_rejects_short_radius():
    with pytest.raises(DomainError):
        DegradationSpec(2.0, 1.0, 2)
