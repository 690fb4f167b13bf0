import math

import numpy as np
import pytest
import torch
from skimage.metrics import structural_similarity

from threemti.errors import BadChannelCount, InputError, ShapeMismatch, TooSmall
from threemti.logs import FORMAT_VERSION
from threemti.metrics import CSV_HEADER, MetricsReport, paired_bootstrap, psnr, ssim


def brute_psnr(a: np.ndarray, b: np.ndarray) -> float:
    total = 0.0
    for x, y in zip(a.ravel().tolist(), b.ravel().tolist()):
        total += (x - y) ** 2
    return 10.0 * math.log10(1.0 / (total / a.size))


def random_pairs(n=10, size=32):
    rng = np.random.default_rng(0)
    for _ in range(n):
        a = rng.random((size, size))
        yield a, np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)


def test_psnr_sentinel_and_closed_form():
    a = torch.rand(1, 16, 16)
    assert psnr(a, a) == math.inf
    b = a.double()
    assert psnr(b + 0.1, b) == pytest.approx(20.0, abs=1e-6)
    with pytest.raises(ShapeMismatch):
        psnr(a, a[:, :8])


def test_psnr_matches_brute_force():
    for a, b in random_pairs():
        assert psnr(a, b) == pytest.approx(brute_psnr(a, b), abs=1e-6)


def test_psnr_falls_as_noise_grows():
    rng = np.random.default_rng(1)
    a = rng.random((32, 32))
    sign = rng.choice([-1.0, 1.0], size=a.shape)
    values = [psnr(a + amp * sign, a) for amp in (0.01, 0.02, 0.05, 0.1)]
    assert all(x > y for x, y in zip(values, values[1:]))


def test_ssim_identity_and_symmetry():
    for a, b in random_pairs(3):
        assert ssim(a, a) == pytest.approx(1.0, abs=1e-9)
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-9)


def test_ssim_matches_reference_implementation():
    for a, b in random_pairs():
        ref = structural_similarity(
            a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False, data_range=1.0
        )
        assert ssim(a, b) == pytest.approx(ref, abs=1e-4)


def test_ssim_of_inverted_half_plane_is_negative():
    a = np.zeros((32, 32))
    a[:, 16:] = 1.0
    assert ssim(a, 1.0 - a) < 0.0


def test_ssim_input_checks():
    with pytest.raises(TooSmall):
        ssim(np.zeros((10, 10)), np.zeros((10, 10)))
    with pytest.raises(ShapeMismatch):
        ssim(np.zeros((16, 16)), np.zeros((16, 17)))
    with pytest.raises(BadChannelCount):
        ssim(torch.zeros(3, 16, 16), torch.zeros(3, 16, 16))
    assert ssim(torch.ones(1, 1, 16, 16), torch.ones(1, 1, 16, 16)) == pytest.approx(1.0)


def test_report_aggregates_and_serialization(tmp_path):
    report = MetricsReport(config_hash="abc", seed=2, condition="warped")
    report.add("a", 30.0, 0.9, 0.1)
    report.add("b", 20.0, 0.7, 0.3)
    agg = report.aggregates
    assert agg["psnr_db"] == {"mean": 25.0, "std": 5.0}
    assert agg["ssim"]["mean"] == pytest.approx(0.8)
    assert list(report.column("perceptual")) == [0.1, 0.3]

    path = report.save_json(tmp_path / "r.json")
    back = MetricsReport.load_json(path)
    assert back.per_image == report.per_image
    assert back.aggregates == report.aggregates
    assert (back.condition, back.seed, back.config_hash) == ("warped", 2, "abc")

    row = report.csv_row().strip().split(",")
    assert len(row) == len(CSV_HEADER.strip().split(","))
    assert row[0] == "warped"
    assert row[1] == "2"
    assert row[-2] == "2"
    assert row[-1] == str(FORMAT_VERSION)


def test_infinite_psnr_leaves_std_undefined():
    report = MetricsReport()
    report.add("a", math.inf, 1.0, 0.0)
    report.add("b", math.inf, 1.0, 0.0)
    assert report.aggregates["psnr_db"]["mean"] == math.inf
    assert math.isnan(report.aggregates["psnr_db"]["std"])
    assert report.aggregates["ssim"] == {"mean": 1.0, "std": 0.0}


def test_paired_bootstrap():
    rng = np.random.default_rng(0)
    base = rng.normal(30.0, 1.0, 100)
    worse = base - 1.0 + rng.normal(0.0, 0.1, 100)
    res = paired_bootstrap(base, worse, samples=500, seed=3)
    assert res.low <= res.mean_diff <= res.high
    assert res.excludes_zero
    assert res == paired_bootstrap(base, worse, samples=500, seed=3)

    same = paired_bootstrap(base, base, samples=100)
    assert (same.mean_diff, same.low, same.high) == (0.0, 0.0, 0.0)
    assert not same.excludes_zero

    with pytest.raises(ShapeMismatch):
        paired_bootstrap([1.0], [1.0, 2.0])
    with pytest.raises(InputError):
        paired_bootstrap([], [])
