import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from splatstream.errors import ContractError, DimensionError
from splatstream.metrics import EvalReport, gaussian_window, psnr, ssim


def test_psnr_identical_is_capped(rng):
    a = rng.uniform(size=(8, 8, 3))
    assert psnr(a, a) == 100.0


def test_psnr_uniform_offset_is_20db():
    a = np.full((4, 4, 3), 0.3)
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)


def test_psnr_matches_direct_formula(rng):
    a, b = rng.uniform(size=(9, 7, 3)), rng.uniform(size=(9, 7, 3))
    mse = sum(float((x - y) ** 2) for x, y in zip(a.ravel(), b.ravel())) / a.size
    assert psnr(a, b) == pytest.approx(10 * np.log10(1 / mse), abs=1e-9)


def test_psnr_shape_mismatch():
    with pytest.raises(DimensionError):
        psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


def test_window_normalized():
    w = gaussian_window()
    assert w.size == 11 and w.sum() == pytest.approx(1.0) and np.argmax(w) == 5


def test_ssim_identical_is_one(rng):
    a = rng.uniform(size=(16, 16, 3))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_checkerboard_inverse_is_negative():
    board = (np.indices((16, 16)).sum(0) % 2).astype(float)
    a = np.repeat(board[..., None], 3, axis=2)
    assert ssim(a, 1 - a) < 0


def test_ssim_constant_shift_is_luminance_only():
    a, b = np.full((12, 12), 0.2), np.full((12, 12), 0.7)
    c1 = 0.01**2
    lum = (2 * 0.2 * 0.7 + c1) / (0.2**2 + 0.7**2 + c1)
    assert ssim(a, b) == pytest.approx(lum, rel=1e-9)  # flat images: contrast-structure term is exactly 1
    assert lum < 1


@settings(max_examples=15)
@given(st.integers(0, 2**16))
def test_ssim_matches_skimage(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(size=(20, 24, 3))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    ref = structural_similarity(
        a, b, channel_axis=2, data_range=1.0, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
    )
    assert ssim(a, b) == pytest.approx(ref, abs=1e-4)  # skimage averages over a cropped border


@settings(max_examples=15)
@given(st.integers(0, 2**16))
def test_metrics_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=(12, 12, 3)), rng.uniform(size=(12, 12, 3))
    assert psnr(a, b) == psnr(b, a)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)
    assert -1 <= ssim(a, b) <= 1


def test_ssim_small_image_rejected():
    with pytest.raises(ContractError):
        ssim(np.zeros((10, 12, 3)), np.zeros((10, 12, 3)))


def test_report_means_and_json(tmp_path, rng):
    rep = EvalReport()
    for k in range(3):
        a = rng.uniform(size=(12, 12, 3))
        rep.add(f"v{k}", a, np.clip(a + 0.05 * k + 0.01, 0, 1))
    assert rep.mean_psnr == pytest.approx(sum(rep.psnr) / 3, abs=1e-9)
    assert rep.mean_ssim == pytest.approx(sum(rep.ssim) / 3, abs=1e-9)
    rep.write(tmp_path / "r.json")
    d = json.loads((tmp_path / "r.json").read_text())
    assert d["views"] == ["v0", "v1", "v2"] and d["mean_psnr"] == rep.mean_psnr
