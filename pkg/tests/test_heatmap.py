"""Tests for heatmap moment extraction."""

import sys
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

# Add src to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from casus.errors import HeatmapError
from casus.geometry import Contour
from casus.heatmap import (
    ContourDistribution,
    HeatmapStack,
    PointGaussian,
    confidence_ellipse,
    coordinate_maps,
    dataset_nll,
    extract_distribution,
    extract_point,
    gaussian_nll,
    heatmap_mean,
    normalize_heatmap,
    render_gaussian_heatmap,
)

BORDER_MARGIN = 3.5


def random_gaussian(gen: np.random.Generator) -> PointGaussian:
    """μ in [-0.5, 0.5]², σ in [0.02, 0.2], |ρ| <= 0.6, at least 3.5σ inside the grid."""
    while True:
        mu = gen.uniform(-0.5, 0.5, 2)
        sd = gen.uniform(0.02, 0.2, 2)
        rho = gen.uniform(-0.6, 0.6)
        if np.all(np.abs(mu) + BORDER_MARGIN * sd <= 1.0):
            break
    sx, sy = sd
    sigma = np.array([[sx * sx, rho * sx * sy], [rho * sx * sy, sy * sy]])
    return PointGaussian(mu, sigma)


def test_coordinate_maps_regression():
    """Test the coordinate-map formula on the smallest grids."""
    i_map, j_map = coordinate_maps(2, 2)
    np.testing.assert_array_equal(i_map[0], [-0.5, 0.5])
    np.testing.assert_array_equal(j_map[:, 0], [-0.5, 0.5])
    i_map, _ = coordinate_maps(1, 3)
    np.testing.assert_allclose(i_map[0], [-2.0 / 3.0, 0.0, 2.0 / 3.0], atol=1e-15)
    with pytest.raises(HeatmapError):
        coordinate_maps(0, 3)


def test_render_extract_round_trip():
    """Test that 100 rendered Gaussians are recovered from their heatmaps."""
    gen = np.random.default_rng(7)
    for _ in range(100):
        g = random_gaussian(gen)
        z = render_gaussian_heatmap(g, 256, 256)
        got = extract_point(z)
        assert np.max(np.abs(got.mu - g.mu)) < 1e-3
        rel = np.linalg.norm(got.sigma - g.sigma) / np.linalg.norm(g.sigma)
        assert rel < 0.05


def test_delta_heatmap_has_zero_covariance():
    z = np.zeros((5, 5))
    z[2, 3] = 1.0
    g = extract_point(z)
    np.testing.assert_allclose(g.mu, [0.4, 0.0], atol=1e-15)
    np.testing.assert_allclose(g.sigma, np.zeros((2, 2)), atol=1e-15)


def test_normalize_heatmap_clamps_and_scales():
    """Test that negatives are clamped before normalizing to unit mass."""
    raw = HeatmapStack(np.array([[[1.0, -3.0], [1.0, 2.0]]]))
    norm = normalize_heatmap(raw)
    assert norm.normalized
    np.testing.assert_allclose(norm.grids[0], [[0.25, 0.0], [0.25, 0.5]])


def test_normalize_heatmap_rejects_zero_mass():
    with pytest.raises(HeatmapError) as excinfo:
        normalize_heatmap(HeatmapStack(-np.ones((2, 3, 3))))
    assert excinfo.value.code == "zero_mass"


def test_heatmap_mean_requires_normalized_grid():
    with pytest.raises(HeatmapError):
        heatmap_mean(np.ones((4, 4)))


def test_extract_distribution_all_points():
    """Test extraction over a stack gives canonical landmarks and K points."""
    gen = np.random.default_rng(3)
    truth = [random_gaussian(gen) for _ in range(5)]
    stack = HeatmapStack(np.stack([render_gaussian_heatmap(g, 128, 128) for g in truth]))
    dist = extract_distribution(stack, view="A2C", frame="ES", case_id="c1")
    assert dist.k == 5
    assert dist.landmarks == (0, 2, 4)
    assert dist.case_id == "c1"
    for k, g in enumerate(truth):
        np.testing.assert_allclose(dist.means[k], g.mu, atol=2e-3)


def test_extract_distribution_empty_stack():
    with pytest.raises(HeatmapError, match="empty stack"):
        extract_distribution(HeatmapStack(np.zeros((0, 4, 4))))


def test_gaussian_nll_hand_value():
    """Test the loss against ½log|Σ| + ½ Mahalanobis² computed by hand."""
    means = np.zeros((5, 2))
    covs = np.tile(4.0 * np.eye(2), (5, 1, 1))
    dist = ContourDistribution(means, covs, (0, 2, 4))
    target = Contour(np.tile([2.0, 0.0], (5, 1)), (0, 2, 4))
    expected = 0.5 * np.log(16.0) + 0.5 * (4.0 / 4.0)
    assert gaussian_nll(dist, target) == pytest.approx(expected, rel=1e-12)
    assert dataset_nll([dist, dist], [target, target]) == pytest.approx(expected)


def test_gaussian_nll_matches_scipy():
    gen = np.random.default_rng(11)
    points = [random_gaussian(gen) for _ in range(7)]
    dist = ContourDistribution(
        np.stack([p.mu for p in points]), np.stack([p.sigma for p in points]), (0, 3, 6)
    )
    target = Contour(gen.uniform(-0.5, 0.5, (7, 2)), (0, 3, 6))
    ref = np.mean(
        [
            -stats.multivariate_normal(p.mu, p.sigma).logpdf(s) - np.log(2 * np.pi)
            for p, s in zip(points, target.points)
        ]
    )
    assert gaussian_nll(dist, target) == pytest.approx(ref, rel=1e-9)


def test_confidence_ellipse_axis_aligned():
    g = PointGaussian([0.0, 0.0], np.diag([4.0, 1.0]))
    major, minor, angle = confidence_ellipse(g, 0.95)
    radius = np.sqrt(stats.chi2.ppf(0.95, df=2))
    assert major == pytest.approx(2.0 * radius)
    assert minor == pytest.approx(radius)
    assert abs(np.sin(angle)) == pytest.approx(0.0, abs=1e-12)


def test_heatmap_mean_flip_equivariance():
    """Test that flipping columns negates x and flipping rows negates y."""
    gen = np.random.default_rng(5)
    for _ in range(10):
        g = random_gaussian(gen)
        z = render_gaussian_heatmap(g, 64, 96)
        mu = heatmap_mean(z)
        np.testing.assert_allclose(heatmap_mean(z[:, ::-1]), [-mu[0], mu[1]], atol=1e-6)
        np.testing.assert_allclose(heatmap_mean(z[::-1, :]), [mu[0], -mu[1]], atol=1e-6)
    raw = gen.uniform(0.0, 1.0, (7, 9))
    z = raw / raw.sum()
    mu = heatmap_mean(z)
    np.testing.assert_allclose(heatmap_mean(z[:, ::-1]), [-mu[0], mu[1]], atol=1e-12)


def test_gaussian_nll_decreases_toward_target():
    """Test the loss falls at every step as the means move onto the target."""
    gen = np.random.default_rng(8)
    points = [random_gaussian(gen) for _ in range(5)]
    covs = np.stack([p.sigma for p in points])
    target = Contour(gen.uniform(-0.5, 0.5, (5, 2)), (0, 2, 4))
    start = target.points + gen.normal(0.0, 0.1, (5, 2))
    losses = [
        gaussian_nll(ContourDistribution(start + t * (target.points - start), covs, (0, 2, 4)), target)
        for t in np.linspace(0.0, 1.0, 10)
    ]
    assert np.all(np.diff(losses) < 0)
    floor = 0.5 * np.mean([np.log(np.linalg.det(c)) for c in covs])
    assert losses[-1] == pytest.approx(floor, rel=1e-6)
