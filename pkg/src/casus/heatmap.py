"""Per-point Gaussian moments from probability heatmaps (DSNT-style).

Each of the K heatmaps is normalized into a density over pixel centers; its
mean and covariance under the coordinate maps I (columns) and J (rows) give
the predicted point location and its aleatoric uncertainty.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from .errors import HeatmapError
from .geometry import Contour, Frame, Landmarks, View
from .numerics import clamp_psd, regularize, symmetrize


logger = logging.getLogger(__name__)

NORMALIZATION_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class HeatmapStack:
    grids: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        grids = np.asarray(self.grids, dtype=np.float64)
        if grids.ndim == 2:
            grids = grids[None]
        if grids.ndim != 3:
            raise HeatmapError(f"heatmap stack must be (K, H, W), got {grids.shape}")
        object.__setattr__(self, "grids", grids)

    @property
    def k(self) -> int:
        return self.grids.shape[0]


@dataclass(frozen=True, eq=False)
class PointGaussian:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64).reshape(2)
        sigma = np.asarray(self.sigma, dtype=np.float64).reshape(2, 2)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", symmetrize(sigma))


@dataclass(frozen=True, eq=False)
class ContourDistribution:
    """Predicted per-point Gaussians (μ̂ᵏ, Σ̂ᵏ) for one image."""

    means: np.ndarray
    covariances: np.ndarray
    landmarks: Landmarks
    view: View = View.A4C
    frame: Frame = Frame.ED
    case_id: str = ""
    spacing_mm: Tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        means = np.asarray(self.means, dtype=np.float64).reshape(-1, 2)
        covs = np.asarray(self.covariances, dtype=np.float64).reshape(-1, 2, 2)
        if means.shape[0] != covs.shape[0]:
            raise HeatmapError(
                f"{means.shape[0]} means but {covs.shape[0]} covariances"
            )
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covariances", symmetrize(covs))
        object.__setattr__(self, "landmarks", tuple(int(i) for i in self.landmarks))
        object.__setattr__(self, "view", View(self.view))
        object.__setattr__(self, "frame", Frame(self.frame))
        object.__setattr__(
            self, "spacing_mm", tuple(float(s) for s in self.spacing_mm)
        )

    @property
    def k(self) -> int:
        return self.means.shape[0]

    def point(self, k: int) -> PointGaussian:
        return PointGaussian(self.means[k], self.covariances[k])

    @property
    def points(self) -> List[PointGaussian]:
        return [self.point(k) for k in range(self.k)]

    def mean_contour(self) -> Contour:
        return Contour(
            points=self.means,
            landmarks=self.landmarks,
            spacing_mm=self.spacing_mm,
            view=self.view,
            frame=self.frame,
            case_id=self.case_id,
        )

    def replace(self, means: np.ndarray, covariances: np.ndarray) -> "ContourDistribution":
        return ContourDistribution(
            means=means,
            covariances=covariances,
            landmarks=self.landmarks,
            view=self.view,
            frame=self.frame,
            case_id=self.case_id,
            spacing_mm=self.spacing_mm,
        )


def canonical_landmarks(k: int) -> Landmarks:
    return (0, (k - 1) // 2, k - 1)


def coordinate_maps(h: int, w: int) -> Tuple[np.ndarray, np.ndarray]:
    """Coordinate maps I (x) and J (y) with 1-based i, j:

    I[i, j] = (2j - (W+1)) / W,  J[i, j] = (2i - (H+1)) / H.
    """
    if h < 1 or w < 1:
        raise HeatmapError(f"grid size must be positive, got {h}x{w}")
    cols = (2.0 * np.arange(1, w + 1) - (w + 1)) / w
    rows = (2.0 * np.arange(1, h + 1) - (h + 1)) / h
    i_map = np.broadcast_to(cols[None, :], (h, w)).copy()
    j_map = np.broadcast_to(rows[:, None], (h, w)).copy()
    return i_map, j_map


def normalize_heatmap(raw: HeatmapStack) -> HeatmapStack:
    """Clamp negatives to zero and scale each grid to unit mass."""
    grids = raw.grids
    if not np.all(np.isfinite(grids)):
        raise HeatmapError("heatmap contains non-finite values", "non_finite")
    grids = np.clip(grids, 0.0, None)
    mass = grids.sum(axis=(1, 2))
    empty = np.flatnonzero(mass <= 0)
    if empty.size:
        raise HeatmapError(
            f"heatmap grid(s) {empty.tolist()} have zero total mass", "zero_mass"
        )
    return HeatmapStack(grids / mass[:, None, None], normalized=True)


def _check_normalized(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2:
        raise HeatmapError(f"expected a single H×W grid, got {z.shape}")
    if np.any(z < 0) or abs(z.sum() - 1.0) > NORMALIZATION_TOL:
        raise HeatmapError("heatmap grid is not normalized", "not_normalized")
    return z


def heatmap_mean(z: np.ndarray) -> np.ndarray:
    """Expected coordinates (⟨Z, I⟩_F, ⟨Z, J⟩_F)."""
    z = _check_normalized(z)
    i_map, j_map = coordinate_maps(*z.shape)
    return np.array([np.sum(z * i_map), np.sum(z * j_map)])


def heatmap_covariance(z: np.ndarray, mu: np.ndarray) -> np.ndarray:
    z = _check_normalized(z)
    i_map, j_map = coordinate_maps(*z.shape)
    di = i_map - mu[0]
    dj = j_map - mu[1]
    var_x = np.sum(z * di * di)
    var_y = np.sum(z * dj * dj)
    cov = np.sum(z * di * dj)
    return np.array([[var_x, cov], [cov, var_y]])


def extract_point(z: np.ndarray) -> PointGaussian:
    mu = heatmap_mean(z)
    return PointGaussian(mu, clamp_psd(heatmap_covariance(z, mu)))


def extract_distribution(
    stack: HeatmapStack,
    landmarks: Optional[Landmarks] = None,
    view: View = View.A4C,
    frame: Frame = Frame.ED,
    case_id: str = "",
    spacing_mm: Tuple[float, float] = (1.0, 1.0),
) -> ContourDistribution:
    """Normalize (when needed) and extract (μ̂ᵏ, Σ̂ᵏ) for every grid."""
    if stack.k == 0:
        raise HeatmapError("empty stack", "empty_stack")
    if not stack.normalized:
        stack = normalize_heatmap(stack)
    points = [extract_point(z) for z in stack.grids]
    return ContourDistribution(
        means=np.stack([p.mu for p in points]),
        covariances=np.stack([p.sigma for p in points]),
        landmarks=landmarks or canonical_landmarks(stack.k),
        view=view,
        frame=frame,
        case_id=case_id,
        spacing_mm=spacing_mm,
    )


def _point_nll(means, covs, targets) -> np.ndarray:
    covs = regularize(symmetrize(covs))
    det = np.linalg.det(covs)
    if np.any(det <= 0) or not np.all(np.isfinite(det)):
        raise HeatmapError("singular covariance after jitter", "singular_covariance")
    resid = means - targets
    maha = np.einsum("ki,kij,kj->k", resid, np.linalg.inv(covs), resid)
    return 0.5 * np.log(det) + 0.5 * maha


def gaussian_nll(dist: ContourDistribution, target: Contour) -> float:
    """Mean over points of ½log|Σ̂ᵏ| + ½(μ̂ᵏ−sᵏ)ᵀ(Σ̂ᵏ)⁻¹(μ̂ᵏ−sᵏ)."""
    if dist.k != target.k:
        raise HeatmapError(f"K mismatch: {dist.k} vs {target.k}", "k_mismatch")
    return float(np.mean(_point_nll(dist.means, dist.covariances, target.points)))


def dataset_nll(
    dists: Sequence[ContourDistribution], targets: Sequence[Contour]
) -> float:
    """The loss averaged over N images and K points, 1/(NK) ΣΣ."""
    if len(dists) != len(targets) or not dists:
        raise HeatmapError("need matching, non-empty prediction and target lists")
    return float(np.mean([gaussian_nll(d, t) for d, t in zip(dists, targets)]))


def render_gaussian_heatmap(g: PointGaussian, h: int, w: int) -> np.ndarray:
    """Gaussian density of ``g`` sampled at pixel centers, normalized to 1."""
    try:
        chol = np.linalg.cholesky(g.sigma)
    except np.linalg.LinAlgError as e:
        raise HeatmapError("covariance is not positive definite", "not_pd") from e
    i_map, j_map = coordinate_maps(h, w)
    d = np.stack([i_map - g.mu[0], j_map - g.mu[1]], axis=-1)
    # whiten with the Cholesky factor instead of inverting sigma
    white = np.linalg.solve(chol, d.reshape(-1, 2).T)
    log_density = -0.5 * np.sum(white * white, axis=0).reshape(h, w)
    grid = np.exp(log_density - log_density.max())
    return grid / grid.sum()


def confidence_ellipse(g: PointGaussian, level: float = 0.95) -> Tuple[float, float, float]:
    """Semi-axes (major, minor) and angle in radians of the ``level`` ellipse."""
    radius2 = stats.chi2.ppf(level, df=2)
    w, v = np.linalg.eigh(clamp_psd(g.sigma))
    major = float(np.sqrt(radius2 * w[1]))
    minor = float(np.sqrt(radius2 * w[0]))
    angle = float(np.arctan2(v[1, 1], v[0, 1]))
    return major, minor, angle
