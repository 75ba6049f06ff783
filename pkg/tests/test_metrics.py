import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from fcremove.metrics import (
    PSNR_CAP,
    MetricReport,
    PerceptualBackendError,
    crop_box,
    perceptual,
    psnr,
    psnr_mask,
    pyramid_distance,
    register_backend,
    unregister_backend,
)


def test_psnr_examples():
    a = np.zeros((4, 4, 3))
    assert psnr(a, a) == PSNR_CAP
    assert psnr(a, np.full_like(a, 0.1)) == pytest.approx(20.0)
    assert psnr(a, np.ones_like(a)) == pytest.approx(0.0)
    with pytest.raises(ValueError):
        psnr(a, np.zeros((4, 4, 1)))


def test_psnr_mask_only_counts_masked_pixels():
    a = np.zeros((8, 8, 3))
    b = a.copy()
    b[4:, :, :] = 1.0  # error lives outside the mask
    m = np.zeros((8, 8), bool)
    m[:4] = True
    assert psnr_mask(a, b, m) == PSNR_CAP
    b[0, 0, 0] = 0.5
    # one channel of one of 32 pixels: mse = 0.25 / 96
    assert psnr_mask(a, b, m) == pytest.approx(10 * math.log10(96 / 0.25))
    with pytest.raises(ValueError):
        psnr_mask(a, b, np.zeros((8, 8), bool))
    with pytest.raises(ValueError):
        psnr_mask(a, b, np.ones((4, 4), bool))


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=50, deadline=None)
def test_psnr_mask_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((6, 5, 3)), rng.random((6, 5, 3))
    m = rng.random((6, 5)) > 0.5
    m[0, 0] = True
    total, count = 0.0, 0
    for y in range(6):
        for x in range(5):
            if m[y, x]:
                for c in range(3):
                    total += (a[y, x, c] - b[y, x, c]) ** 2
                    count += 1
    assert psnr_mask(a, b, m) == pytest.approx(10 * math.log10(count / total), rel=1e-12)
    # channels-first input gives the same answer
    assert psnr_mask(a.transpose(2, 0, 1), b.transpose(2, 0, 1), m) == pytest.approx(psnr_mask(a, b, m), rel=1e-12)
    full = np.ones((6, 5), bool)
    assert psnr_mask(a, b, full) == pytest.approx(psnr(a, b), rel=1e-12)


def test_crop_box():
    m = np.zeros((32, 32), bool)
    m[10:12, 3:5] = True
    assert crop_box(m) == (6, 16, 0, 9)
    assert crop_box(m, margin=0) == (10, 12, 3, 5)
    m[:] = False
    m[31, 31] = True
    assert crop_box(m) == (27, 32, 27, 32)
    with pytest.raises(ValueError):
        crop_box(np.zeros((4, 4), bool))


def test_pyramid_distance_properties():
    g = torch.Generator().manual_seed(0)
    a = torch.rand(2, 3, 16, 16, generator=g)
    b = torch.rand(2, 3, 16, 16, generator=g)
    assert float(pyramid_distance(a, a)) == 0.0
    assert float(pyramid_distance(a, b)) > 0
    assert float(pyramid_distance(a, b)) == pytest.approx(float(pyramid_distance(b, a)))
    x = a.clone().requires_grad_(True)
    pyramid_distance(x, b).backward()
    assert torch.isfinite(x.grad).all() and x.grad.abs().sum() > 0


def test_perceptual_absent_and_present():
    a, b = np.zeros((16, 16, 3)), np.ones((16, 16, 3))
    m = np.zeros((16, 16), bool)
    m[2:4, 2:4] = True
    assert perceptual(a, b).absent
    assert perceptual(a, b, backend="none").absent
    r = perceptual(a, b, backend="pyramid")
    assert not r.absent and r.backend == "pyramid" and r.value > 0
    crop = perceptual(a, b, region="masked-crop", mask=m, backend="pyramid")
    assert crop.value == pytest.approx(float(pyramid_distance(torch.zeros(1, 3, 8, 8), torch.ones(1, 3, 8, 8))))
    with pytest.raises(ValueError):
        perceptual(a, b, region="elsewhere")
    with pytest.raises(ValueError):
        perceptual(a, b, region="masked-crop", backend="pyramid")
    with pytest.raises(KeyError):
        perceptual(a, b, backend="lpips-alex")


def test_perceptual_backend_failure_is_distinct():
    def broken(x, y):
        raise RuntimeError("weights missing")

    register_backend("broken", broken)
    try:
        with pytest.raises(PerceptualBackendError):
            perceptual(np.zeros((4, 4, 3)), np.zeros((4, 4, 3)), backend="broken")
    finally:
        unregister_backend("broken")


def test_metric_report_aggregate():
    rep = MetricReport()
    assert rep.aggregate()["n"] == 0
    rep.add(0, 20.0, 10.0)
    rep.add(1, 30.0, 14.0)
    agg = rep.aggregate()
    assert agg == {"n": 2, "psnr": 25.0, "psnr_mask": 12.0, "perceptual": None}
