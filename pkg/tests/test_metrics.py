import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from guidedsr.errors import DataError
from guidedsr.metrics import SSIM_K1, evaluate, psnr, ssim


def test_psnr_identical_is_inf():
    a = np.random.default_rng(0).random((16, 16))
    assert psnr(a, a, 1.0) == math.inf


def test_psnr_uniform_offset():
    a = np.random.default_rng(0).uniform(0, 200, (20, 20))
    # 20 log10(25.5) = 28.1308...
    assert psnr(a, a + 10, 255) == pytest.approx(28.1308036, abs=1e-6)
    assert psnr(a, a + 10, 255) == pytest.approx(20 * math.log10(255 / 10), abs=1e-9)


def test_psnr_matches_reference():
    r = np.random.default_rng(3)
    a, b = r.random((13, 17)), r.random((13, 17))
    mse = sum((float(x) - float(y)) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size
    assert psnr(a, b, 1.0) == pytest.approx(10 * math.log10(1.0 / mse), abs=1e-6)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_metrics_symmetric(seed):
    r = np.random.default_rng(seed)
    a, b = r.random((16, 16)), r.random((16, 16))
    assert psnr(a, b, 1.0) == pytest.approx(psnr(b, a, 1.0), rel=1e-12)
    s = ssim(a, b, 1.0)
    assert s == pytest.approx(ssim(b, a, 1.0), rel=1e-12)
    assert -1 <= s <= 1


def test_psnr_extent_mismatch():
    with pytest.raises(DataError):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)), 1.0)
    with pytest.raises(DataError):
        psnr(np.zeros((4, 4)), np.zeros((4, 4)), 0.0)


def test_psnr_decreases_with_noise():
    r = np.random.default_rng(0)
    a = r.uniform(0, 255, (32, 32))
    noise = r.standard_normal((32, 32))
    values = [psnr(a, a + s * noise, 255) for s in (0.5, 1, 2, 4, 8)]
    assert all(x > y for x, y in zip(values, values[1:]))


def test_ssim_identical():
    a = np.random.default_rng(0).uniform(0, 255, (20, 20))
    assert abs(ssim(a, a, 255) - 1.0) < 1e-9


def test_ssim_constant_closed_form():
    c1, c2 = 100.0, 150.0
    cc = (SSIM_K1 * 255) ** 2
    expect = (2 * c1 * c2 + cc) / (c1 ** 2 + c2 ** 2 + cc)
    got = ssim(np.full((16, 16), c1), np.full((16, 16), c2), 255)
    assert abs(got - expect) < 1e-6


def test_ssim_inverted_binary_lower():
    a = (np.random.default_rng(0).random((24, 24)) > 0.5).astype(float)
    assert ssim(a, 1 - a, 1.0) < ssim(a, a, 1.0)


def test_ssim_small_image_rejected():
    with pytest.raises(DataError):
        ssim(np.zeros((10, 30)), np.zeros((10, 30)), 1.0)


def test_border_crop():
    a = np.zeros((20, 20))
    b = a.copy()
    b[0, :] = 5
    assert psnr(a, b, 1.0, border=2) == math.inf


def test_evaluate_default_range():
    truth = np.random.default_rng(1).uniform(0, 180, (16, 16))
    rep = evaluate(truth + 1, truth)
    assert rep.dynamic_range == pytest.approx(truth.max())
    assert rep.psnr_db == pytest.approx(20 * math.log10(truth.max()), abs=1e-9)
    rep = evaluate(truth, truth, dynamic_range=255)
    assert rep.psnr_db == math.inf and rep.ssim == pytest.approx(1.0, abs=1e-9)
