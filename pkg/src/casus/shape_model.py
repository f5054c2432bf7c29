"""PCA point-distribution models and the posterior shape model (PSM).

Shape vectors interleave coordinates per point, [x0, y0, x1, y1, ...]. A joint
ED/ES model concatenates the ED vector and then the ES vector (4K entries).
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy import linalg

from .errors import ShapeModelError
from .geometry import Frame
from .heatmap import PointGaussian
from .numerics import symmetrize


logger = logging.getLogger(__name__)

RELATIVE_EIGEN_CUTOFF = 1e-10
DEFAULT_EPSILON2 = 0.1


@dataclass(frozen=True, eq=False)
class ShapeModel:
    """Mean shape, factor matrix Q = U·Λ^½ and covariance eigenvalues (descending)."""

    mean: np.ndarray
    factors: np.ndarray
    eigenvalues: np.ndarray
    kind: str = "single"
    k: int = 0

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        factors = np.asarray(self.factors, dtype=np.float64).reshape(mean.size, -1)
        eig = np.asarray(self.eigenvalues, dtype=np.float64).reshape(-1)
        if factors.shape[1] != eig.size:
            raise ShapeModelError(
                f"rank mismatch: {factors.shape[1]} factors, {eig.size} eigenvalues"
            )
        if self.kind not in ("single", "joint"):
            raise ShapeModelError(f"unknown model kind {self.kind!r}")
        k = self.k or mean.size // (2 if self.kind == "single" else 4)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "factors", factors)
        object.__setattr__(self, "eigenvalues", eig)
        object.__setattr__(self, "k", int(k))

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def rank(self) -> int:
        return self.eigenvalues.size

    @property
    def n_points(self) -> int:
        return self.dim // 2

    def covariance(self) -> np.ndarray:
        return self.factors @ self.factors.T

    def project(self, shape: np.ndarray) -> np.ndarray:
        """Coefficients α with s ≈ mean + Qα (least squares)."""
        if self.rank == 0:
            return np.zeros(0)
        return np.linalg.lstsq(self.factors, np.asarray(shape) - self.mean, rcond=None)[0]

    def reconstruct(self, alpha: np.ndarray) -> np.ndarray:
        return self.mean + self.factors @ np.asarray(alpha, dtype=np.float64)

    def frame_marginal(self, frame: Frame) -> "ShapeModel":
        """Single-frame model implied by a joint ED/ES model."""
        if self.kind != "joint":
            raise ShapeModelError("frame_marginal needs a joint model")
        half = self.dim // 2
        rows = slice(0, half) if Frame(frame) is Frame.ED else slice(half, self.dim)
        q = self.factors[rows]
        return from_covariance(self.mean[rows], q @ q.T, kind="single", k=self.k)

    # --- Serialization ---

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "rank": self.rank,
            "mean": self.mean.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "factors": self.factors.reshape(-1).tolist(),
            "kind": self.kind,
            "k": self.k,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ShapeModel":
        try:
            dim, rank = int(data["dim"]), int(data["rank"])
            mean = np.asarray(data["mean"], dtype=np.float64)
            factors = np.asarray(data["factors"], dtype=np.float64)
            eig = np.asarray(data["eigenvalues"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as e:
            raise ShapeModelError(f"malformed shape-model record: {e}") from e
        if mean.size != dim or factors.size != dim * rank or eig.size != rank:
            raise ShapeModelError("shape-model arrays do not match dim/rank")
        return cls(
            mean=mean,
            factors=factors.reshape(dim, rank),
            eigenvalues=eig,
            kind=data.get("kind", "single"),
            k=int(data.get("k", 0)),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ShapeModel":
        try:
            with open(path, encoding="utf-8") as f:
                data = json.load(f)
        except FileNotFoundError as e:
            raise ShapeModelError(f"file not found: {path}", "missing_file") from e
        except json.JSONDecodeError as e:
            raise ShapeModelError(f"invalid JSON in {path}: {e}") from e
        return cls.from_dict(data)


@dataclass(frozen=True, eq=False)
class ConditionalShapeDistribution:
    mu_c: np.ndarray
    sigma_c: np.ndarray
    observed_indices: tuple
    epsilon2: float

    @property
    def n_points(self) -> int:
        return self.mu_c.size // 2


# --- Fitting ---


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Make the largest-magnitude entry of each column positive."""
    if vectors.size == 0:
        return vectors
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def from_covariance(
    mean: np.ndarray, covariance: np.ndarray, kind: str = "single", k: int = 0
) -> ShapeModel:
    """Eigendecompose a covariance and drop eigenvalues below 1e-10·λmax."""
    w, v = linalg.eigh(symmetrize(covariance))
    order = np.argsort(w)[::-1]
    w, v = w[order], v[:, order]
    lam_max = w[0] if w.size else 0.0
    if lam_max <= 0:
        keep = np.zeros(w.size, dtype=bool)
    else:
        keep = w > RELATIVE_EIGEN_CUTOFF * lam_max
    w, v = w[keep], _fix_signs(v[:, keep])
    return ShapeModel(
        mean=np.asarray(mean, dtype=np.float64),
        factors=v * np.sqrt(w),
        eigenvalues=w,
        kind=kind,
        k=k,
    )


def _as_matrix(shapes) -> np.ndarray:
    try:
        x = np.asarray([np.asarray(s, dtype=np.float64).reshape(-1) for s in shapes])
    except ValueError as e:
        raise ShapeModelError(f"inconsistent shape dimensions: {e}") from e
    if x.dtype == object or x.ndim != 2:
        raise ShapeModelError("inconsistent shape dimensions")
    return x


def fit_pca(shapes: Sequence[np.ndarray], kind: str = "single", k: int = 0) -> ShapeModel:
    """PCA with the population (1/N) covariance."""
    x = _as_matrix(shapes)
    if x.shape[0] < 2:
        raise ShapeModelError(f"need at least 2 shapes, got {x.shape[0]}")
    mean = x.mean(axis=0)
    centered = x - mean
    covariance = centered.T @ centered / x.shape[0]
    model = from_covariance(mean, covariance, kind=kind, k=k)
    logger.info(
        "Fitted %s shape model: N=%d, D=%d, rank=%d", kind, x.shape[0], x.shape[1], model.rank
    )
    return model


def recenter(
    model: ShapeModel, shapes: Optional[Sequence[np.ndarray]], mu_hat: np.ndarray
) -> ShapeModel:
    """Re-express the model's variations around the predicted shape μ̂.

    With training shapes the covariance is (1/N)Σ(sₙ−μ̂)(sₙ−μ̂)ᵀ; without them
    the identical quantity QQᵀ + δδᵀ, δ = μ̄ − μ̂, is used.
    """
    mu_hat = np.asarray(mu_hat, dtype=np.float64).reshape(-1)
    if mu_hat.size != model.dim:
        raise ShapeModelError(f"mu_hat has dim {mu_hat.size}, model has {model.dim}")
    if shapes is not None:
        x = _as_matrix(shapes)
        if x.shape[1] != model.dim:
            raise ShapeModelError("training shapes do not match the model dimension")
        centered = x - mu_hat
        covariance = centered.T @ centered / x.shape[0]
    else:
        delta = model.mean - mu_hat
        covariance = model.covariance() + np.outer(delta, delta)
    return from_covariance(mu_hat, covariance, kind=model.kind, k=model.k)


# --- Posterior shape model ---


def coordinate_rows(point_indices: Sequence[int]) -> np.ndarray:
    idx = np.asarray(point_indices, dtype=int)
    return np.column_stack([2 * idx, 2 * idx + 1]).reshape(-1)


def posterior(
    model: ShapeModel,
    partial: np.ndarray,
    observed_indices: Sequence[int],
    epsilon2: float = DEFAULT_EPSILON2,
) -> ConditionalShapeDistribution:
    """Conditional Gaussian of the full shape given observed points.

    μ_c = μ + Q(Q_gᵀQ_g + ε²I_r)⁻¹Q_gᵀ(s⁽ᵍ⁾ − μ_g)
    Σ_c = ε²Q(Q_gᵀQ_g + ε²I_r)⁻¹Qᵀ
    """
    if not epsilon2 > 0:
        raise ShapeModelError(f"epsilon2 must be positive, got {epsilon2}")
    idx = np.asarray(observed_indices, dtype=int).reshape(-1)
    if idx.size == 0:
        raise ShapeModelError("at least one observed point is required")
    if len(set(idx.tolist())) != idx.size:
        raise ShapeModelError("observed indices must be distinct")
    if idx.min() < 0 or idx.max() >= model.n_points:
        raise ShapeModelError(
            f"observed index out of range for {model.n_points} points"
        )
    partial = np.asarray(partial, dtype=np.float64).reshape(-1, 2)
    if partial.shape[0] != idx.size:
        raise ShapeModelError("partial points and observed indices differ in length")

    order = np.argsort(idx, kind="stable")
    idx, partial = idx[order], partial[order]
    rows = coordinate_rows(idx)
    q = model.factors
    if model.rank == 0:
        return ConditionalShapeDistribution(
            model.mean.copy(), np.zeros((model.dim, model.dim)), tuple(idx), epsilon2
        )

    q_g = q[rows]
    gram = q_g.T @ q_g + epsilon2 * np.eye(model.rank)
    chol = linalg.cho_factor(gram, lower=True)
    innovation = partial.reshape(-1) - model.mean[rows]
    mu_c = model.mean + q @ linalg.cho_solve(chol, q_g.T @ innovation)
    # Σ_c = ε² B Bᵀ with B = Q L⁻ᵀ, symmetric PSD by construction
    b = linalg.solve_triangular(chol[0], q.T, lower=True).T
    sigma_c = epsilon2 * (b @ b.T)
    return ConditionalShapeDistribution(mu_c, sigma_c, tuple(idx.tolist()), epsilon2)


def marginal_2x2(dist: ConditionalShapeDistribution, k: int) -> PointGaussian:
    if not 0 <= k < dist.n_points:
        raise ShapeModelError(f"point index {k} out of range")
    sl = slice(2 * k, 2 * k + 2)
    return PointGaussian(dist.mu_c[sl], dist.sigma_c[sl, sl])


def marginal_blocks(dist: ConditionalShapeDistribution, points: Sequence[int]):
    """Stacked means (n, 2) and 2×2 diagonal blocks (n, 2, 2) for ``points``."""
    idx = np.asarray(points, dtype=int)
    mu = dist.mu_c.reshape(-1, 2)[idx]
    rows = np.stack([2 * idx, 2 * idx + 1], axis=1)
    sigma = dist.sigma_c[rows[:, :, None], rows[:, None, :]]
    return mu, sigma
