import numpy as np
import pytest
from skimage.metrics import structural_similarity

from uva.metrics import PSNR_CAP, psnr, ssim


def test_psnr_known_values():
    a = np.zeros((8, 8, 3))
    assert psnr(a, a + 0.5) == pytest.approx(10 * np.log10(4), abs=1e-12)  # 6.0206 dB
    assert psnr(a, a) == PSNR_CAP == 99.0
    assert psnr(a, a + 1e-12) == PSNR_CAP
    with pytest.raises(ValueError):
        psnr(a, np.zeros((8, 9, 3)))


@pytest.mark.parametrize("shape", [(32, 40, 3), (24, 24), (64, 48, 3)])
def test_ssim_matches_reference_implementation(shape, rng):
    a = rng.random(shape)
    b = np.clip(a + rng.normal(0, 0.1, shape), 0, 1)
    ref = structural_similarity(
        a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False, data_range=1.0,
        channel_axis=-1 if len(shape) == 3 else None,
    )
    assert abs(ssim(a, b) - ref) < 1e-6


def test_ssim_identity_and_range(rng):
    a = rng.random((20, 20, 3))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert -1 <= ssim(a, 1 - a) < 0.5
    with pytest.raises(ValueError):
        ssim(a, a[:-1])
