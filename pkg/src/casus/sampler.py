"""Gaussian fusion and hierarchical, temporally consistent contour sampling.

Sampling starts from the two basal points and the apex, drawn from their
predicted marginals. Each following level conditions the shape model on every
point drawn so far, fuses the conditional 2×2 marginals with the predictions
and draws the midpoints between already sampled indices.
"""

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import IntEnum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import FusionError, ScheduleError, ShapeModelError
from .geometry import Contour, Frame, Landmarks, View
from .heatmap import ContourDistribution, PointGaussian
from .numerics import psd_sqrt, regularize, symmetrize
from .shape_model import ShapeModel, marginal_blocks, posterior


logger = logging.getLogger(__name__)


# --- Random streams ---


class StreamTag(IntEnum):
    ED = 0
    ES = 1
    ORDER = 2
    A2C = 3
    A4C = 4


def frame_tag(frame: Frame) -> StreamTag:
    return StreamTag.ED if Frame(frame) is Frame.ED else StreamTag.ES


def view_tag(view: View) -> StreamTag:
    return StreamTag.A2C if View(view) is View.A2C else StreamTag.A4C


def stream_key(text: str) -> int:
    """Stable 63-bit integer for a textual key such as a case id."""
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


@dataclass(frozen=True)
class RandomStream:
    """Counter-based stream addressed by (seed, path).

    Identical (seed, path) pairs give identical draws; distinct paths are
    independent streams of the same Philox generator family.
    """

    seed: int
    path: Tuple[int, ...] = ()

    def child(self, *keys: int) -> "RandomStream":
        return RandomStream(self.seed, self.path + tuple(int(k) for k in keys))

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(
            self.seed & 0xFFFFFFFFFFFFFFFF, spawn_key=self.path
        )
        return np.random.Generator(np.random.Philox(seq))


# --- Fusion ---


def fuse_batch(
    mu_pred: np.ndarray,
    sigma_pred: np.ndarray,
    mu_prior: np.ndarray,
    sigma_prior: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    """Product of Gaussians for stacks of 2D points.

    μ_m = Σ̂(Σ̂+Σ_c)⁻¹μ_c + Σ_c(Σ̂+Σ_c)⁻¹μ̂,  Σ_m = Σ̂(Σ̂+Σ_c)⁻¹Σ_c.
    When the sum needs jitter, the jitter's share of the weights is split evenly
    between both means so the weights still sum to the identity.
    """
    arrays = [
        np.asarray(a, dtype=np.float64)
        for a in (mu_pred, sigma_pred, mu_prior, sigma_prior)
    ]
    if not all(np.all(np.isfinite(a)) for a in arrays):
        raise FusionError("non-finite fusion input", "non_finite")
    mu_p, s_p, mu_c, s_c = arrays
    total = s_p + s_c
    total_reg = regularize(total)
    inv = np.linalg.inv(total_reg)
    lam = np.trace(total_reg - total, axis1=-2, axis2=-1) / total.shape[-1]

    w_c = s_p @ inv
    w_p = s_c @ inv
    mu = np.einsum("...ij,...j->...i", w_c, mu_c)
    mu = mu + np.einsum("...ij,...j->...i", w_p, mu_p)
    mu = mu + 0.5 * lam[..., None] * np.einsum("...ij,...j->...i", inv, mu_p + mu_c)
    sigma = symmetrize(w_c @ s_c)
    return mu, sigma


def fuse_gaussians(pred: PointGaussian, prior: PointGaussian) -> PointGaussian:
    mu, sigma = fuse_batch(pred.mu, pred.sigma, prior.mu, prior.sigma)
    return PointGaussian(mu, sigma)


# --- Schedule ---


@dataclass(frozen=True)
class SamplingSchedule:
    levels: Tuple[Tuple[int, ...], ...]

    @property
    def k(self) -> int:
        return sum(len(level) for level in self.levels)


def build_schedule(k: int, landmarks: Landmarks) -> SamplingSchedule:
    """Landmarks first, then floor midpoints of consecutive sampled indices."""
    if k < 5 or k % 2 == 0:
        raise ScheduleError(f"K must be odd and >= 5, got {k}")
    canonical = (0, (k - 1) // 2, k - 1)
    if tuple(landmarks) != canonical:
        raise ScheduleError(
            f"landmarks {tuple(landmarks)} are not the canonical layout {canonical}"
        )
    levels = [canonical]
    sampled = sorted(canonical)
    while len(sampled) < k:
        mids = tuple(
            (a + b) // 2 for a, b in zip(sampled[:-1], sampled[1:]) if b - a >= 2
        )
        levels.append(mids)
        sampled = sorted(sampled + list(mids))
    return SamplingSchedule(tuple(levels))


# --- Sampling ---


def _draw(mu: np.ndarray, sigma: np.ndarray, z: np.ndarray) -> np.ndarray:
    return mu + np.einsum("...ij,...j->...i", psd_sqrt(sigma), z)


def hierarchical_sample(
    dist: ContourDistribution,
    model: ShapeModel,
    epsilon2: float,
    rng: RandomStream,
    schedule: Optional[SamplingSchedule] = None,
) -> Contour:
    """Draw one contour; ``model`` must already be recentered on dist's means.

    Standard normals are drawn once per stream as a (K, 2) block and point k
    always consumes row k, so results do not depend on evaluation order.
    """
    k = dist.k
    if model.dim != 2 * k:
        raise ShapeModelError(
            f"model dimension {model.dim} does not match 2K={2 * k}", "dim_mismatch"
        )
    schedule = schedule or build_schedule(k, dist.landmarks)
    z = rng.generator().standard_normal((k, 2))

    points = np.empty((k, 2))
    first = list(schedule.levels[0])
    points[first] = _draw(dist.means[first], dist.covariances[first], z[first])
    sampled = first
    for level in schedule.levels[1:]:
        new = list(level)
        cond = posterior(model, points[sampled], sampled, epsilon2)
        mu_c, sigma_c = marginal_blocks(cond, new)
        mu_m, sigma_m = fuse_batch(
            dist.means[new], dist.covariances[new], mu_c, sigma_c
        )
        points[new] = _draw(mu_m, sigma_m, z[new])
        sampled = sampled + new
    return dist.mean_contour().with_points(points)


def temporal_sample(
    ed: ContourDistribution,
    es: ContourDistribution,
    joint_model: ShapeModel,
    epsilon2: float,
    rng: RandomStream,
    frame_models: Optional[Dict[Frame, ShapeModel]] = None,
) -> Tuple[Contour, Contour]:
    """Draw a temporally consistent (ED, ES) pair.

    A coin flip picks the first frame, sampled hierarchically. The joint model
    conditioned on that whole contour is fused point by point with the other
    frame's predictions, and the second contour is sampled from the result.
    """
    k = ed.k
    if es.k != k:
        raise ShapeModelError(f"ED has {k} points but ES has {es.k}", "dim_mismatch")
    if joint_model.kind != "joint" or joint_model.dim != 4 * k:
        raise ShapeModelError(
            f"joint model of dimension 4K={4 * k} required, got {joint_model.dim}",
            "dim_mismatch",
        )
    if frame_models is None:
        frame_models = {f: joint_model.frame_marginal(f) for f in Frame}

    first = Frame.ED if rng.child(StreamTag.ORDER).generator().random() < 0.5 else Frame.ES
    second = Frame.ES if first is Frame.ED else Frame.ED
    dists = {Frame.ED: ed, Frame.ES: es}
    offsets = {Frame.ED: 0, Frame.ES: k}

    first_contour = hierarchical_sample(
        dists[first], frame_models[first], epsilon2, rng.child(frame_tag(first))
    )
    observed = list(range(offsets[first], offsets[first] + k))
    cond = posterior(joint_model, first_contour.points, observed, epsilon2)
    mu_c, sigma_c = marginal_blocks(cond, range(offsets[second], offsets[second] + k))
    target = dists[second]
    mu_m, sigma_m = fuse_batch(target.means, target.covariances, mu_c, sigma_c)
    second_contour = hierarchical_sample(
        target.replace(mu_m, sigma_m),
        frame_models[second],
        epsilon2,
        rng.child(frame_tag(second)),
    )
    contours = {first: first_contour, second: second_contour}
    return contours[Frame.ED], contours[Frame.ES]


def sample_contours(
    dist: ContourDistribution,
    model: ShapeModel,
    epsilon2: float,
    n: int,
    rng: RandomStream,
    threads: int = 1,
) -> List[Contour]:
    """``n`` hierarchical samples on streams rng.child(i); thread-count invariant."""
    schedule = build_schedule(dist.k, dist.landmarks)

    def _one(i: int) -> Contour:
        return hierarchical_sample(dist, model, epsilon2, rng.child(i), schedule)

    if threads <= 1:
        return [_one(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(_one, range(n)))


def independent_pair(
    ed: ContourDistribution,
    es: ContourDistribution,
    models: Dict[Frame, ShapeModel],
    epsilon2: float,
    rng: RandomStream,
) -> Tuple[Contour, Contour]:
    """ED and ES drawn separately, each with its own frame stream."""
    return (
        hierarchical_sample(ed, models[Frame.ED], epsilon2, rng.child(StreamTag.ED)),
        hierarchical_sample(es, models[Frame.ES], epsilon2, rng.child(StreamTag.ES)),
    )


__all__: Sequence[str] = [
    "RandomStream",
    "SamplingSchedule",
    "StreamTag",
    "build_schedule",
    "fuse_batch",
    "fuse_gaussians",
    "hierarchical_sample",
    "independent_pair",
    "sample_contours",
    "stream_key",
    "temporal_sample",
]
