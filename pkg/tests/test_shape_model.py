"""Tests for PCA shape models and the posterior shape model."""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add src to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from casus.errors import ShapeModelError
from casus.experiments import fit_shape_model
from casus.geometry import Frame, View
from casus.shape_model import (
    ShapeModel,
    fit_pca,
    from_covariance,
    marginal_2x2,
    marginal_blocks,
    posterior,
    recenter,
)
from casus.synth import SynthConfig, base_shape, generate_population, population_covariance


def small_model(k: int = 11, seed: int = 0) -> ShapeModel:
    cfg = SynthConfig(k=k, seed=seed)
    return from_covariance(base_shape(cfg).reshape(-1), population_covariance(cfg), k=k)


def random_shapes(n: int, dim: int, seed: int = 0) -> np.ndarray:
    gen = np.random.default_rng(seed)
    mixing = gen.normal(size=(dim, dim))
    return gen.normal(size=(n, dim)) @ mixing.T + gen.normal(size=dim)


def test_fit_pca_eigenvalues_descending():
    """Test eigenvalues are sorted and the model reproduces training shapes."""
    shapes = random_shapes(60, 10)
    model = fit_pca(shapes, k=5)
    assert model.rank == 10
    assert np.all(np.diff(model.eigenvalues) <= 0)
    np.testing.assert_allclose(model.reconstruct(model.project(shapes[3])), shapes[3], atol=1e-9)
    centered = shapes - shapes.mean(axis=0)
    np.testing.assert_allclose(model.covariance(), centered.T @ centered / 60, atol=1e-9)


def test_fit_pca_is_deterministic_in_sign():
    shapes = random_shapes(40, 6, seed=2)
    a = fit_pca(shapes)
    b = fit_pca(shapes.copy())
    np.testing.assert_array_equal(a.factors, b.factors)
    idx = np.argmax(np.abs(a.factors), axis=0)
    assert np.all(a.factors[idx, np.arange(a.rank)] > 0)


def test_fit_pca_needs_two_shapes():
    with pytest.raises(ShapeModelError):
        fit_pca(random_shapes(1, 4))
    with pytest.raises(ShapeModelError):
        fit_pca([np.zeros(4), np.zeros(6)])


def test_fit_pca_recovers_generator_covariance():
    """Test the fitted ED covariance approaches the synthetic generator's."""
    cfg = SynthConfig(k=11, n_population=2000, seed=5)
    contours = generate_population(cfg, "train")
    model = fit_shape_model(contours, "single", View.A4C, Frame.ED)
    truth = population_covariance(cfg, "single", Frame.ED)
    rel = np.linalg.norm(model.covariance() - truth) / np.linalg.norm(truth)
    assert rel < 0.10


def test_fit_pca_recovery_at_500_draws():
    """Test the N=500 fit error is within twice the RMS sampling error of a covariance.

    For Gaussian draws E‖S − Σ‖²_F = (tr(Σ)² + ‖Σ‖²_F)/N.
    """
    cfg = SynthConfig(n_population=500, seed=5)
    contours = generate_population(cfg, "train")
    model = fit_shape_model(contours, "single", View.A4C, Frame.ED)
    truth = population_covariance(cfg, "single", Frame.ED)
    rel = np.linalg.norm(model.covariance() - truth) / np.linalg.norm(truth)
    rms = np.sqrt((np.trace(truth) ** 2 / np.sum(truth**2) + 1.0) / 500)
    assert rel < 2.0 * rms


def test_low_rank_truncation():
    """Test eigenvalues below the relative cutoff are dropped."""
    cov = np.diag([4.0, 1.0, 1e-14, 0.0])
    model = from_covariance(np.zeros(4), cov)
    assert model.rank == 2
    np.testing.assert_allclose(model.eigenvalues, [4.0, 1.0])


def test_posterior_observed_equals_mean():
    """Test that observing mean points returns the mean shape."""
    model = small_model()
    observed = [0, 5, 10]
    partial = model.mean.reshape(-1, 2)[observed]
    cond = posterior(model, partial, observed, epsilon2=0.1)
    np.testing.assert_allclose(cond.mu_c, model.mean, atol=1e-10)


def test_posterior_collapses_for_small_slack():
    model = small_model()
    observed = list(range(model.n_points))
    cond = posterior(model, model.mean.reshape(-1, 2), observed, epsilon2=1e-12)
    assert np.linalg.norm(cond.sigma_c) < 1e-10


def test_posterior_large_slack_is_prior():
    """Test that a huge slack leaves the prior covariance QQᵀ."""
    model = small_model()
    eps2 = 1e6 * model.eigenvalues[0]
    cond = posterior(model, model.mean.reshape(-1, 2)[[0, 5, 10]], [0, 5, 10], eps2)
    prior = model.covariance()
    assert np.linalg.norm(cond.sigma_c - prior) / np.linalg.norm(prior) < 0.01


def test_posterior_shrinks_variance_near_observed_points():
    """Test observed points lose variance and near neighbours lose more than far ones."""
    model = small_model()
    prior = model.covariance()
    gen = np.random.default_rng(6)
    for _ in range(100):
        observed = sorted(gen.choice(model.n_points, size=gen.integers(1, 6), replace=False))
        eps2 = 10.0 ** gen.uniform(-6, 0)
        cond = posterior(model, model.mean.reshape(-1, 2)[observed], observed, eps2)
        for k in observed:
            block = slice(2 * k, 2 * k + 2)
            assert np.trace(marginal_2x2(cond, k).sigma) <= np.trace(prior[block, block]) + 1e-15

    observed = [0, 5, 10]
    cond = posterior(model, model.mean.reshape(-1, 2)[observed], observed, 1e-6)
    var = np.array([np.trace(marginal_2x2(cond, k).sigma) for k in range(model.n_points)])
    blocks = [slice(2 * k, 2 * k + 2) for k in range(model.n_points)]
    prior_var = np.array([np.trace(prior[b, b]) for b in blocks])
    assert np.all(var[observed] < 0.01 * prior_var[observed])
    assert np.all(var <= prior_var + 1e-15)
    assert var[1] < var[2] and var[4] < var[3]
    assert var[6] < var[7] and var[9] < var[8]


def test_posterior_covariance_is_symmetric_psd():
    model = small_model()
    gen = np.random.default_rng(12)
    for _ in range(50):
        observed = sorted(gen.choice(model.n_points, size=gen.integers(1, 11), replace=False))
        partial = model.mean.reshape(-1, 2)[observed] + gen.normal(0, 0.02, (len(observed), 2))
        cond = posterior(model, partial, observed, 10.0 ** gen.uniform(-8, 2))
        sigma = cond.sigma_c
        np.testing.assert_allclose(sigma, sigma.T, atol=1e-15)
        assert np.linalg.eigvalsh(sigma).min() >= -1e-12 * max(np.linalg.norm(sigma), 1e-300)


def test_posterior_matches_gaussian_conditioning():
    """Test against textbook conditioning with observation noise ε²."""
    contours = generate_population(SynthConfig(k=11, n_population=500, seed=1), "train")
    model = fit_shape_model(contours, "single", View.A4C, Frame.ED)
    observed = [0, 3, 5, 7, 10]
    gen = np.random.default_rng(4)
    partial = model.mean.reshape(-1, 2)[observed] + gen.normal(0, 0.02, (5, 2))
    eps2 = 1e-4

    cond = posterior(model, partial, observed, eps2)

    rows = np.column_stack([2 * np.array(observed), 2 * np.array(observed) + 1]).reshape(-1)
    sigma = model.covariance()
    s_gg = sigma[np.ix_(rows, rows)] + eps2 * np.eye(rows.size)
    gain = sigma[:, rows] @ np.linalg.inv(s_gg)
    mu_ref = model.mean + gain @ (partial.reshape(-1) - model.mean[rows])
    sigma_ref = sigma - gain @ sigma[rows, :]
    np.testing.assert_allclose(cond.mu_c, mu_ref, atol=1e-8)
    scale = np.linalg.norm(sigma_ref)
    assert np.linalg.norm(cond.sigma_c - sigma_ref) / scale < 0.02


def test_posterior_is_order_independent():
    model = small_model()
    pts = model.mean.reshape(-1, 2)[[2, 8]] + 0.01
    a = posterior(model, pts, [2, 8])
    b = posterior(model, pts[::-1], [8, 2])
    np.testing.assert_allclose(a.mu_c, b.mu_c, atol=1e-12)
    np.testing.assert_allclose(a.sigma_c, b.sigma_c, atol=1e-12)


@pytest.mark.parametrize(
    "observed, eps2",
    [([], 0.1), ([1, 1], 0.1), ([11], 0.1), ([1], 0.0)],
)
def test_posterior_rejects_bad_input(observed, eps2):
    model = small_model()
    partial = np.zeros((len(observed), 2))
    with pytest.raises(ShapeModelError):
        posterior(model, partial, observed, eps2)


def test_marginal_blocks_match_marginal_2x2():
    model = small_model()
    cond = posterior(model, model.mean.reshape(-1, 2)[[0, 5, 10]], [0, 5, 10])
    mu, sigma = marginal_blocks(cond, [2, 7])
    g = marginal_2x2(cond, 7)
    np.testing.assert_allclose(mu[1], g.mu)
    np.testing.assert_allclose(sigma[1], g.sigma)


def test_recenter_without_shapes_matches_training_shapes():
    """Test QQᵀ + δδᵀ equals the second moment of the shapes about μ̂."""
    shapes = random_shapes(50, 8, seed=9)
    model = fit_pca(shapes)
    mu_hat = shapes.mean(axis=0) + 0.3
    a = recenter(model, shapes, mu_hat)
    b = recenter(model, None, mu_hat)
    np.testing.assert_allclose(a.mean, mu_hat)
    np.testing.assert_allclose(a.covariance(), b.covariance(), atol=1e-9)
    with pytest.raises(ShapeModelError):
        recenter(model, None, np.zeros(6))


def test_recenter_adds_offset_outer_product():
    """Test the recentered covariance is QQᵀ + δδᵀ around the new mean."""
    model = fit_pca(random_shapes(50, 8, seed=3))
    same = recenter(model, None, model.mean)
    np.testing.assert_allclose(same.mean, model.mean)
    np.testing.assert_allclose(same.covariance(), model.covariance(), atol=1e-9)

    delta = np.linspace(-0.4, 0.3, 8)
    mu_hat = model.mean - delta
    moved = recenter(model, None, mu_hat)
    np.testing.assert_allclose(moved.mean, mu_hat)
    np.testing.assert_allclose(
        moved.covariance(), model.covariance() + np.outer(delta, delta), atol=1e-9
    )


def test_joint_frame_marginal():
    """Test the ED/ES marginals of a joint model match the generator blocks."""
    cfg = SynthConfig(k=11)
    joint_cov = population_covariance(cfg, "joint")
    mean = np.concatenate([base_shape(cfg).reshape(-1)] * 2)
    joint = from_covariance(mean, joint_cov, kind="joint", k=11)
    es = joint.frame_marginal(Frame.ES)
    assert es.kind == "single"
    np.testing.assert_allclose(
        es.covariance(), population_covariance(cfg, "single", Frame.ES), atol=1e-10
    )
    with pytest.raises(ShapeModelError):
        es.frame_marginal(Frame.ED)


def test_fit_joint_model_from_pairs():
    contours = generate_population(SynthConfig(k=11, n_population=30), "train")
    model = fit_shape_model(contours, "joint")
    assert model.kind == "joint"
    assert model.dim == 44


def test_shape_model_file(tmp_path):
    """Test saving and loading keeps the model."""
    model = small_model()
    path = tmp_path / "model.json"
    path.write_text(model.to_json())
    loaded = ShapeModel.load(path)
    np.testing.assert_array_equal(loaded.factors, model.factors)
    assert loaded.k == 11
    assert path.read_text() == loaded.to_json()


def test_shape_model_load_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"dim": 4, "rank": 1, "mean": [0, 0], "factors": [1], "eigenvalues": [1]}')
    with pytest.raises(ShapeModelError):
        ShapeModel.load(bad)
    with pytest.raises(ShapeModelError) as excinfo:
        ShapeModel.load(tmp_path / "missing.json")
    assert excinfo.value.code == "missing_file"
