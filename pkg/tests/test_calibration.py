"""Tests for ECE, UCE, mutual information and correlation."""

import math
import sys
from pathlib import Path

import numpy as np
import pytest

# Add src to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from casus.calibration import (
    CalibrationReport,
    dice_uncertainty_correlation,
    ece,
    mutual_information,
    pixel_ece,
    reliability_table,
    segmentation_case_metrics,
    uce_equal_count,
    uncertainty_from_variance,
)
from casus.errors import CalibrationError
from casus.geometry import SegmentationMask


def naive_ece(conf, acc, m):
    total = 0.0
    for b in range(m):
        lo, hi = b / m, (b + 1) / m
        members = [
            i for i, c in enumerate(conf) if lo <= c < hi or (b == m - 1 and c == 1.0)
        ]
        if members:
            mc = sum(conf[i] for i in members) / len(members)
            ma = sum(acc[i] for i in members) / len(members)
            total += len(members) / len(conf) * abs(ma - mc)
    return total


def naive_uce(err, unc, m):
    order = sorted(range(len(err)), key=lambda i: (unc[i], i))
    n = len(err)
    base, extra = divmod(n, m)
    total, start = 0.0, 0
    for b in range(m):
        size = base + (1 if b < extra else 0)
        members = order[start : start + size]
        start += size
        me = sum(err[i] for i in members) / size
        mu = sum(unc[i] for i in members) / size
        total += size / n * abs(me - mu)
    return total


def test_ece_matches_naive_loop():
    """Test vectorized ECE against a direct bin loop."""
    gen = np.random.default_rng(0)
    conf = list(gen.uniform(0, 1, 503)) + [0.0, 1.0, 0.5]
    acc = list((gen.uniform(0, 1, len(conf)) < 0.7).astype(float))
    value, bins = ece(conf, acc, 10)
    assert value == pytest.approx(naive_ece(conf, acc, 10), abs=1e-12)
    assert sum(b.count for b in bins) == len(conf)


def test_ece_perfect_calibration_is_zero():
    value, _ = ece([0.25, 0.25, 0.25, 0.25], [1, 0, 0, 0], 4)
    assert value == pytest.approx(0.0, abs=1e-15)


def test_ece_rejects_out_of_range():
    with pytest.raises(CalibrationError):
        ece([1.2], [1.0])
    with pytest.raises(CalibrationError):
        ece([0.2, 0.3], [1.0])


def test_uce_matches_naive_loop():
    """Test equal-count UCE, including uneven bins and tied uncertainties."""
    gen = np.random.default_rng(1)
    unc = list(np.round(gen.uniform(0, 1, 97), 1))
    err = list(np.abs(gen.normal(0, 1, 97)))
    value, bins = uce_equal_count(err, unc, 10)
    assert value == pytest.approx(naive_uce(err, unc, 10), abs=1e-12)
    assert [b.count for b in bins] == [10] * 7 + [9] * 3


def test_uce_order_does_not_depend_on_input_order():
    gen = np.random.default_rng(2)
    unc = np.round(gen.uniform(0, 1, 40), 1)
    err = gen.uniform(0, 1, 40)
    ids = np.array([f"case-{i:03d}" for i in range(40)])
    perm = gen.permutation(40)
    a, _ = uce_equal_count(err, unc, 4, ids)
    b, _ = uce_equal_count(err[perm], unc[perm], 4, ids[perm])
    assert a == pytest.approx(b, abs=1e-12)


def test_uce_too_few_samples():
    with pytest.raises(CalibrationError) as excinfo:
        uce_equal_count([0.1, 0.2], [0.1, 0.2], 5)
    assert excinfo.value.code == "too_few_samples"


def test_uncertainty_from_variance():
    sigma2 = np.array([4.0, 0.0])
    np.testing.assert_allclose(uncertainty_from_variance(sigma2), [2.0, 0.0])
    np.testing.assert_allclose(
        uncertainty_from_variance(sigma2, scale="expected-abs"),
        [2.0 * math.sqrt(2.0 / math.pi), 0.0],
    )
    np.testing.assert_allclose(uncertainty_from_variance(sigma2, use_variance=True), sigma2)
    with pytest.raises(CalibrationError):
        uncertainty_from_variance(sigma2, scale="iqr")


def test_mutual_information_matches_naive_sum():
    gen = np.random.default_rng(3)
    unc = gen.uniform(0, 1, (16, 16))
    err = gen.uniform(0, 1, (16, 16)) < unc
    bins_u = np.minimum((unc * 10).astype(int), 9).reshape(-1)
    bins_e = err.reshape(-1).astype(int)
    n = bins_u.size
    expected = 0.0
    for i in range(10):
        for j in range(2):
            p = np.sum((bins_u == i) & (bins_e == j)) / n
            if p > 0:
                pu = np.sum(bins_u == i) / n
                pe = np.sum(bins_e == j) / n
                expected += p * math.log(p / (pu * pe))
    assert mutual_information(unc, err) == pytest.approx(expected, abs=1e-12)


def test_mutual_information_independent_constant_is_zero():
    unc = np.full((4, 4), 0.3)
    err = np.eye(4, dtype=bool)
    assert mutual_information(unc, err) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(CalibrationError):
        mutual_information(unc, np.zeros((3, 3)))


def test_mutual_information_checkerboard_is_ln2():
    """Test a checkerboard error map with matching two-level uncertainty gives ln 2."""
    rows, cols = np.indices((8, 8))
    err = (rows + cols) % 2 == 1
    unc = np.where(err, 0.85, 0.15)
    assert mutual_information(unc, err) == pytest.approx(math.log(2.0), abs=1e-12)


def entropy(labels):
    _, counts = np.unique(labels, return_counts=True)
    p = counts / counts.sum()
    return float(-np.sum(p * np.log(p)))


def test_mutual_information_bounds_and_permutation():
    """Test 0 <= MI <= min(H(unc bins), H(err)) and invariance to pixel order."""
    gen = np.random.default_rng(9)
    for _ in range(20):
        unc = gen.uniform(0, 1, (12, 12)) ** gen.uniform(0.5, 3.0)
        err = gen.uniform(0, 1, (12, 12)) < unc
        value = mutual_information(unc, err)
        u_bins = np.minimum((unc * 10).astype(int), 9)
        assert -1e-12 <= value <= min(entropy(u_bins), entropy(err)) + 1e-12
        perm = gen.permutation(unc.size)
        shuffled = mutual_information(
            unc.reshape(-1)[perm].reshape(12, 12), err.reshape(-1)[perm].reshape(12, 12)
        )
        assert shuffled == pytest.approx(value, abs=1e-12)
    same = gen.uniform(0, 1, (10, 10)) < 0.3
    assert mutual_information(same.astype(float), same) == pytest.approx(entropy(same), abs=1e-12)


def test_dice_uncertainty_correlation():
    """Test the sign convention: lower Dice with higher uncertainty is positive."""
    dices = [0.9, 0.8, 0.7, 0.6]
    uncs = [0.1, 0.2, 0.35, 0.4]
    corr = dice_uncertainty_correlation(dices, uncs)
    assert corr > 0.9
    ref = -np.corrcoef(dices, uncs)[0, 1]
    assert corr == pytest.approx(ref, abs=1e-12)
    with pytest.raises(CalibrationError) as excinfo:
        dice_uncertainty_correlation([0.5, 0.5], [0.1, 0.2])
    assert excinfo.value.code == "zero_variance"


def test_dice_uncertainty_correlation_independent_is_near_zero():
    gen = np.random.default_rng(10)
    n = 1000
    dices = gen.uniform(0.6, 1.0, n)
    uncs = gen.uniform(0.0, 0.3, n)
    assert abs(dice_uncertainty_correlation(dices, uncs)) < 3.0 / math.sqrt(n)
    assert dice_uncertainty_correlation(dices, 1.0 - dices) == pytest.approx(1.0)
    assert dice_uncertainty_correlation(dices, dices) == pytest.approx(-1.0)


def test_reliability_table_skips_empty_bins():
    _, bins = ece([0.05, 0.95], [0.0, 1.0], 10)
    rows = reliability_table(bins)
    assert len(rows) == 2
    assert rows[0][4] == 1
    assert rows[1][0] == pytest.approx(0.9)


def test_segmentation_case_metrics_and_pixel_ece():
    truth = np.zeros((4, 4), dtype=bool)
    truth[:2] = True
    mean = truth.copy()
    mean[2, 0] = True
    samples = [SegmentationMask(truth), SegmentationMask(mean)]
    case = segmentation_case_metrics(samples, SegmentationMask(mean), SegmentationMask(truth))
    assert case.dice == pytest.approx(2 * 8 / 17)
    assert case.error_map.sum() == 1
    assert case.uncertainty_map[2, 0] == pytest.approx(1.0)
    value, _ = pixel_ece([case])
    assert value == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(CalibrationError):
        pixel_ece([])


def test_calibration_report_serializes():
    report = CalibrationReport(metric="ef", n_cases=3, uce=0.1)
    data = report.model_dump()
    assert data["metric"] == "ef"
    assert data["ece"] is None
