import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from skimage.metrics import structural_similarity

from magicct.errors import InputError
from magicct.metrics import IDENTICAL, format_psnr, gaussian_window, psnr, roi_stats, ssim


def test_psnr_by_hand():
    ref = np.array([[0.0, 1.0], [0.0, 1.0]])
    pred = ref + np.array([[0.1, 0.0], [0.0, -0.1]])
    # mse = 0.005, range 1
    assert psnr(pred, ref) == pytest.approx(10 * math.log10(1 / 0.005))
    assert psnr(pred, ref, peak=2.0) == pytest.approx(10 * math.log10(4 / 0.005))


def test_identical_images():
    ref = np.arange(9.0).reshape(3, 3)
    assert psnr(ref, ref) == IDENTICAL
    assert format_psnr(psnr(ref, ref)) == "identical"
    assert format_psnr(12.5) == "12.500000"


def test_psnr_errors():
    with pytest.raises(InputError):
        psnr(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(InputError):
        psnr(np.ones((2, 2)), np.zeros((2, 2)))
    with pytest.raises(InputError):
        psnr(np.ones((2, 2)), np.eye(2), peak=0.0)


@pytest.mark.parametrize("noise", [0.01, 0.1, 0.5])
def test_ssim_matches_reference_implementation(noise, rng):
    ref = rng.random((40, 33))
    pred = ref + noise * rng.standard_normal(ref.shape)
    rng_ = ref.max() - ref.min()
    expected = structural_similarity(pred, ref, data_range=rng_, gaussian_weights=True, sigma=1.5,
                                     use_sample_covariance=False)
    assert ssim(pred, ref) == pytest.approx(expected, abs=1e-12)


def test_ssim_bounds(rng):
    ref = rng.random((20, 20))
    assert ssim(ref, ref) == pytest.approx(1.0)
    # same means, anti-correlated structure
    assert ssim(2 * ref.mean() - ref, ref) < 0
    with pytest.raises(InputError):
        ssim(np.ones((8, 8)), rng.random((8, 8)))


def test_gaussian_window():
    w = gaussian_window(11, 1.5)
    assert w.sum() == pytest.approx(1.0)
    assert np.allclose(w, w[::-1])
    assert w.argmax() == 5


def test_roi_stats(rng):
    img = rng.standard_normal((10, 12))
    mean, sd = roi_stats(img, (2, 3, 4, 5))
    block = img[2:6, 3:8]
    assert mean == pytest.approx(block.mean())
    assert sd == pytest.approx(np.std(block, ddof=1))
    m1, s1 = roi_stats(img, (0, 0, 1, 1))
    assert m1 == img[0, 0] and math.isnan(s1)


@pytest.mark.parametrize("roi", [(0, 0, 0, 3), (8, 0, 4, 4), (-1, 0, 2, 2)])
def test_roi_rejects(roi):
    with pytest.raises(InputError):
        roi_stats(np.zeros((10, 10)), roi)


@settings(max_examples=30, deadline=None)
@given(scale=st.floats(0.01, 100.0), offset=st.floats(-50.0, 50.0), seed=st.integers(0, 1000))
def test_psnr_affine_invariance(scale, offset, seed):
    r = np.random.default_rng(seed)
    ref = r.random((12, 12))
    pred = ref + 0.05 * r.standard_normal(ref.shape)
    a = psnr(pred, ref)
    b = psnr(scale * pred + offset, scale * ref + offset)
    assert b == pytest.approx(a, abs=1e-6)
