import math

import numpy as np
import pytest

from lesionlab.histograms import HistControlParams, HistogramCondition
from oracles import brute_force_dice, brute_force_nsd

from lesionlab.metrics import (
    MetricError,
    MetricReport,
    dice,
    diversity_report,
    histogram_shift_report,
    nsd,
    psnr,
    ssim,
)


def test_dice_trivials_and_hand_value():
    a = np.zeros((2, 2, 2), dtype=np.uint8)
    b = np.zeros((2, 2, 2), dtype=np.uint8)
    a[0, 0, 0] = 1
    assert dice(a, a.copy()) == 100.0
    b[1, 1, 1] = 1
    assert dice(a, b) == 0.0
    a2 = a.copy()
    a2[0, 0, 1] = 1  # |A|=2, |B|=1, overlap 1
    b2 = np.zeros_like(a)
    b2[0, 0, 0] = 1
    assert dice(a2, b2) == pytest.approx(100 * 2 / 3, abs=0.01)
    assert dice(np.zeros_like(a), np.zeros_like(b)) == 100.0


def test_dice_matches_brute_force_on_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(30):
        a = (rng.random((4, 4, 4)) < 0.4).astype(np.uint8)
        b = (rng.random((4, 4, 4)) < 0.4).astype(np.uint8)
        assert dice(a, b) == pytest.approx(brute_force_dice(a, b), abs=1e-12)


def test_dice_dim_mismatch():
    with pytest.raises(MetricError):
        dice(np.zeros((2, 2, 2)), np.zeros((2, 2, 1)))


def test_nsd_identity_and_separation():
    a = np.zeros((6, 6, 6), dtype=np.uint8)
    a[2:4, 2:4, 2:4] = 1
    assert nsd(a, a.copy()) == 100.0
    far = np.zeros_like(a)
    far[5, 5, 5] = 1
    assert nsd(a, far, tau=1.0) == 0.0


def test_nsd_one_voxel_cube_shift():
    a = np.zeros((8, 8, 8), dtype=np.uint8)
    a[2:5, 2:5, 2:5] = 1
    b = np.roll(a, 1, axis=2)
    assert nsd(a, b, tau=1.0) == 100.0


def test_nsd_matches_brute_force_on_random_pairs():
    rng = np.random.default_rng(1)
    for _ in range(25):
        a = (rng.random((4, 4, 4)) < 0.35).astype(np.uint8)
        b = (rng.random((4, 4, 4)) < 0.35).astype(np.uint8)
        got = nsd(a, b, tau=1.0)
        want = brute_force_nsd(a, b, tau=1.0)
        assert got == pytest.approx(want, abs=1e-9)


def test_nsd_spacing_aware():
    a = np.zeros((4, 4, 4), dtype=np.uint8)
    b = np.zeros_like(a)
    a[1, 1, 1] = 1
    b[1, 1, 2] = 1  # 1 voxel apart along x
    assert nsd(a, b, tau=1.0, spacing=(1, 1, 1)) == 100.0
    assert nsd(a, b, tau=1.0, spacing=(1, 1, 3)) == 0.0  # 3 mm apart now


def test_psnr_values():
    a = np.zeros((4, 4, 4), dtype=np.float32)
    assert math.isinf(psnr(a, a.copy()))
    b = a + 0.1
    assert psnr(a, b, peak=1.0) == pytest.approx(20.0, abs=1e-6)
    region = np.zeros((4, 4, 4), dtype=np.uint8)
    region[0, 0, 0] = 1
    c = a.copy()
    c[3, 3, 3] = 0.5  # differs only outside the region
    assert math.isinf(psnr(a, c, region=region))


def test_ssim_identity_and_anticorrelation():
    rng = np.random.default_rng(2)
    a = rng.uniform(-1, 1, (10, 10, 10)).astype(np.float32)
    assert ssim(a, a.copy()) == pytest.approx(100.0, abs=1e-6)
    # zero-mean alternating pattern: anti-correlated copy scores negative
    zz, yy, xx = np.meshgrid(np.arange(10), np.arange(10), np.arange(10), indexing="ij")
    checker = (0.5 * (-1.0) ** (zz + yy + xx)).astype(np.float32)
    assert ssim(checker, -checker) < 0
    n1 = rng.standard_normal((12, 12, 12)) * 0.3
    n2 = rng.standard_normal((12, 12, 12)) * 0.3
    assert abs(ssim(n1, n2)) < 25.0  # independent noise: near zero


def test_metric_symmetry_and_permutation_invariance():
    rng = np.random.default_rng(3)
    a = (rng.random((5, 5, 5)) < 0.4).astype(np.uint8)
    b = (rng.random((5, 5, 5)) < 0.4).astype(np.uint8)
    va = rng.uniform(-1, 1, (5, 5, 5)).astype(np.float32)
    vb = rng.uniform(-1, 1, (5, 5, 5)).astype(np.float32)
    assert dice(a, b) == dice(b, a)
    assert nsd(a, b) == pytest.approx(nsd(b, a))
    assert psnr(va, vb) == pytest.approx(psnr(vb, va))
    assert ssim(va, vb) == pytest.approx(ssim(vb, va))
    # simultaneous spatial permutation (axis transpose) leaves dice invariant
    perm = (2, 0, 1)
    assert dice(np.transpose(a, perm), np.transpose(b, perm)) == dice(a, b)
    assert psnr(np.transpose(va, perm), np.transpose(vb, perm)) == pytest.approx(psnr(va, vb))


def test_diversity_report_identical_and_monotone_in_noise():
    rng = np.random.default_rng(4)
    base = rng.uniform(-1, 1, (8, 8, 8)).astype(np.float32)
    mask = np.zeros((8, 8, 8), dtype=np.uint8)
    mask[2:6, 2:6, 2:6] = 1
    same = diversity_report([(base, base.copy(), mask)])
    assert math.isinf(same["mean_psnr"])
    assert same["mean_ssim"] == pytest.approx(100.0, abs=1e-6)

    def noisy_pairs(scale, n=6):
        pairs = []
        for i in range(n):
            g = np.random.default_rng(10 + i)
            pairs.append(
                (base + scale * g.standard_normal(base.shape), base + scale * g.standard_normal(base.shape), mask)
            )
        return pairs

    low = diversity_report(noisy_pairs(0.05))
    high = diversity_report(noisy_pairs(0.5))
    assert high["mean_ssim"] < low["mean_ssim"]
    with pytest.raises(MetricError):
        diversity_report([])


def test_histogram_shift_report_identity_regime():
    rng = np.random.default_rng(5)
    b = rng.random(64) + 0.05
    src = HistogramCondition(b / b.sum())
    report = histogram_shift_report(
        [[(src, src)]], [src], HistControlParams(1.0, 0.0, 0.0, 0.0)
    )
    assert report["per_control"][0]["l1_gap"] < 1e-9
    assert report["monotone_increasing"] is True


def test_histogram_shift_report_monotone_flag():
    def peaked(idx):
        b = np.full(64, 1e-4)
        b[idx] = 1.0
        return HistogramCondition(b / b.sum())

    src = peaked(30)
    gens_up = [[(src, peaked(10))], [(src, peaked(30))], [(src, peaked(50))]]
    rep = histogram_shift_report(gens_up, [peaked(10), peaked(30), peaked(50)], HistControlParams(0.5, 0.5))
    assert rep["monotone_increasing"] is True
    gens_down = [[(src, peaked(50))], [(src, peaked(30))], [(src, peaked(10))]]
    rep2 = histogram_shift_report(gens_down, [peaked(10), peaked(30), peaked(50)], HistControlParams(0.5, 0.5))
    assert rep2["monotone_increasing"] is False
    with pytest.raises(MetricError):
        histogram_shift_report([], [], HistControlParams(0.5, 0.5))


def test_metric_report_json_roundtrip():
    rep = MetricReport(
        method="demo",
        manifest_hash="abc",
        per_case=[{"volume": "v", "psnr": math.inf}],
        aggregate={"psnr_mean": 12.5},
    )
    text = rep.to_json()
    back = MetricReport.from_json(text)
    assert back.method == "demo"
    assert back.per_case[0]["psnr"] == "inf"
    assert back.aggregate["psnr_mean"] == 12.5
