"""Monte-Carlo propagation of contour uncertainty through clinical metrics.

A grid holds T_e rows (one per epistemic prediction set) of T_a aleatoric
draws each. Its decomposition follows the law of total variance with
population variances, so σ²_a + σ²_e equals the variance of the flattened
grid whenever every row keeps the same number of cells.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import special, stats

from .clinical import ImageKey, MetricKind, MetricFn
from .errors import CasusError, PropagationError
from .geometry import Contour, Frame, SegmentationMask, View
from .heatmap import ContourDistribution
from .sampler import (
    RandomStream,
    frame_tag,
    hierarchical_sample,
    temporal_sample,
    view_tag,
)
from .shape_model import ShapeModel, recenter


logger = logging.getLogger(__name__)

DEFAULT_T_ALEATORIC = 25
DEFAULT_T_EPISTEMIC = 10
MAX_DISCARDED_FRACTION = 0.5

ContourSampler = Callable[[RandomStream], Dict[ImageKey, Contour]]


@dataclass(frozen=True, eq=False)
class MetricSampleGrid:
    """T_e × T_a metric values with a per-cell validity mask."""

    values: np.ndarray
    kind: MetricKind
    valid: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        if values.shape[0] < 1 or values.shape[1] < 1:
            raise PropagationError(f"grid must be at least 1x1, got {values.shape}")
        valid = (
            np.isfinite(values)
            if self.valid is None
            else np.asarray(self.valid, dtype=bool) & np.isfinite(values)
        )
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "valid", valid)
        object.__setattr__(self, "kind", MetricKind(self.kind))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    @property
    def n_cells(self) -> int:
        return self.values.size

    @property
    def n_invalid(self) -> int:
        return int(self.n_cells - np.count_nonzero(self.valid))


@dataclass(frozen=True)
class UncertaintyDecomposition:
    mu: float
    sigma2_aleatoric: float
    sigma2_epistemic: float

    @property
    def sigma2(self) -> float:
        return self.sigma2_aleatoric + self.sigma2_epistemic

    @property
    def sigma(self) -> float:
        return float(np.sqrt(self.sigma2))


@dataclass(frozen=True)
class RejectionOutcome:
    """Result of the rejection rules for one case.

    ``rule`` is 1 for a negative prediction and 3 when more than half of the
    Monte-Carlo cells were discarded by rule 2.
    """

    rejected: bool
    rule: Optional[int]
    n_discarded: int
    grid: MetricSampleGrid


@dataclass(frozen=True)
class RejectionSummary:
    outcomes: List[RejectionOutcome]

    @property
    def n_total(self) -> int:
        return len(self.outcomes)

    @property
    def n_rejected(self) -> int:
        return sum(o.rejected for o in self.outcomes)

    @property
    def percent_rejected(self) -> float:
        return 100.0 * self.n_rejected / self.n_total if self.outcomes else 0.0

    @property
    def kept(self) -> List[RejectionOutcome]:
        return [o for o in self.outcomes if not o.rejected]


# --- Case samplers ---


class CaseSampler:
    """Draws one contour per image of a case from its predicted distributions.

    Shape models are recentered on each image's predicted mean once, here,
    and reused for every draw. With ``temporal`` set, views carrying both
    frames are drawn jointly through the ED/ES model. With ``aleatoric``
    unset the predicted mean contours are returned unchanged.
    """

    def __init__(
        self,
        dists: Mapping[ImageKey, ContourDistribution],
        epsilon2: float,
        shape_model: Optional[ShapeModel] = None,
        joint_model: Optional[ShapeModel] = None,
        temporal: bool = False,
        aleatoric: bool = True,
    ):
        if temporal and joint_model is None:
            raise PropagationError("temporal sampling needs a joint ED/ES model")
        self.dists = dict(dists)
        self.epsilon2 = epsilon2
        self.temporal = temporal
        self.aleatoric = aleatoric
        self._pairs: Dict[View, Tuple[ShapeModel, Dict[Frame, ShapeModel]]] = {}
        self._singles: Dict[ImageKey, ShapeModel] = {}
        if not aleatoric:
            return

        views = sorted({v for v, _ in self.dists}, key=lambda v: v.value)
        for view in views:
            keys = [(view, f) for f in (Frame.ED, Frame.ES) if (view, f) in self.dists]
            if temporal and len(keys) == 2:
                mu_hat = np.concatenate(
                    [self.dists[k].means.reshape(-1) for k in keys]
                )
                joint = recenter(joint_model, None, mu_hat)
                self._pairs[view] = (joint, {f: joint.frame_marginal(f) for f in Frame})
                continue
            for key in keys:
                self._singles[key] = self._single_model(key, shape_model, joint_model)

    def _single_model(
        self,
        key: ImageKey,
        shape_model: Optional[ShapeModel],
        joint_model: Optional[ShapeModel],
    ) -> ShapeModel:
        if shape_model is not None:
            base = shape_model
        elif joint_model is not None:
            base = joint_model.frame_marginal(key[1])
        else:
            raise PropagationError("a shape model is required for aleatoric sampling")
        return recenter(base, None, self.dists[key].means.reshape(-1))

    def __call__(self, rng: RandomStream) -> Dict[ImageKey, Contour]:
        if not self.aleatoric:
            return {key: d.mean_contour() for key, d in self.dists.items()}
        out: Dict[ImageKey, Contour] = {}
        for view, (joint, frame_models) in self._pairs.items():
            ed, es = temporal_sample(
                self.dists[(view, Frame.ED)],
                self.dists[(view, Frame.ES)],
                joint,
                self.epsilon2,
                rng.child(view_tag(view)),
                frame_models,
            )
            out[(view, Frame.ED)] = ed
            out[(view, Frame.ES)] = es
        for key, model in self._singles.items():
            stream = rng.child(view_tag(key[0]), frame_tag(key[1]))
            out[key] = hierarchical_sample(self.dists[key], model, self.epsilon2, stream)
        return out


# --- Propagation ---


def propagate(
    metric: MetricFn,
    samplers: Sequence[ContourSampler],
    t_aleatoric: int,
    rng: RandomStream,
    kind: MetricKind,
    threads: int = 1,
) -> MetricSampleGrid:
    """Evaluate ``metric`` on T_e × T_a draws; cell (i, j) uses stream child(i, j).

    A failing metric evaluation marks its cell invalid instead of aborting.
    """
    if t_aleatoric < 1 or not samplers:
        raise PropagationError(
            f"need T_a >= 1 and T_e >= 1, got {t_aleatoric} and {len(samplers)}"
        )
    cells = [(i, j) for i in range(len(samplers)) for j in range(t_aleatoric)]

    def _cell(ij: Tuple[int, int]) -> float:
        i, j = ij
        try:
            return float(metric(samplers[i](rng.child(i, j))))
        except (CasusError, ValueError, ArithmeticError, np.linalg.LinAlgError) as e:
            logger.debug("Metric failed on cell (%d, %d): %s", i, j, e)
            return float("nan")

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            flat = list(pool.map(_cell, cells))
    else:
        flat = [_cell(ij) for ij in cells]
    values = np.asarray(flat).reshape(len(samplers), t_aleatoric)
    return MetricSampleGrid(values, kind)


def decompose(grid: MetricSampleGrid) -> UncertaintyDecomposition:
    """μ_F, σ²_a and σ²_e over the valid cells of each row."""
    row_means = []
    row_vars = []
    for values, valid in zip(grid.values, grid.valid):
        kept = values[valid]
        if kept.size == 0:
            continue
        row_means.append(kept.mean())
        row_vars.append(kept.var())
    if not row_means:
        raise PropagationError("grid has no valid cells", "empty_grid")
    means = np.asarray(row_means)
    return UncertaintyDecomposition(
        mu=float(means.mean()),
        sigma2_aleatoric=float(np.mean(row_vars)),
        sigma2_epistemic=float(means.var()),
    )


def is_negative(kind: MetricKind, value: float) -> bool:
    """Negativity as used by the rejection rules; non-finite counts as negative."""
    if not np.isfinite(value):
        return True
    return value < 0 if MetricKind(kind).is_fraction else value <= 0


def apply_rejection(grid: MetricSampleGrid, prediction: float) -> RejectionOutcome:
    """Rules, in order: negative prediction; discard negative cells; >50% discarded."""
    if is_negative(grid.kind, prediction):
        return RejectionOutcome(True, 1, grid.n_invalid, grid)
    negative = np.vectorize(lambda v: is_negative(grid.kind, v), otypes=[bool])(
        grid.values
    )
    filtered = replace(grid, valid=grid.valid & ~negative)
    n_discarded = filtered.n_invalid
    if n_discarded > MAX_DISCARDED_FRACTION * grid.n_cells:
        return RejectionOutcome(True, 3, n_discarded, filtered)
    return RejectionOutcome(False, None, n_discarded, filtered)


def reject(cases: Sequence[Tuple[MetricSampleGrid, float]]) -> RejectionSummary:
    """Apply the rejection rules to every (grid, prediction) case."""
    summary = RejectionSummary([apply_rejection(g, p) for g, p in cases])
    if summary.n_rejected:
        logger.info(
            "Rejected %d of %d cases (%.1f%%)",
            summary.n_rejected,
            summary.n_total,
            summary.percent_rejected,
        )
    return summary


def mean_prediction(
    metric: MetricFn, dists: Mapping[ImageKey, ContourDistribution]
) -> float:
    """The metric evaluated on the predicted mean contours."""
    return float(metric({key: d.mean_contour() for key, d in dists.items()}))


def prediction_interval(
    decomposition: UncertaintyDecomposition, level: float = 0.95
) -> Tuple[float, float]:
    """Normal interval μ ± z·σ for the predictive variance."""
    z = stats.norm.ppf(0.5 + level / 2.0)
    half = z * decomposition.sigma
    return decomposition.mu - half, decomposition.mu + half


def coverage(intervals: Sequence[Tuple[float, float]], truths: Sequence[float]) -> float:
    if len(intervals) != len(truths) or not truths:
        raise PropagationError("need matching, non-empty intervals and truths")
    hits = [lo <= t <= hi for (lo, hi), t in zip(intervals, truths)]
    return float(np.mean(hits))


# --- Segmentation uncertainty ---


def entropy_map(masks: Sequence[SegmentationMask], class_count: int = 2) -> np.ndarray:
    """Per-pixel entropy of the mean of T label maps, normalized by log C."""
    if not masks:
        raise PropagationError("at least one sample mask is required")
    if class_count < 2:
        raise PropagationError(f"class_count must be >= 2, got {class_count}")
    shape = masks[0].shape
    if any(m.shape != shape for m in masks):
        raise PropagationError("sample masks differ in shape", "shape_mismatch")
    labels = np.stack([m.grid.astype(np.int64) for m in masks])
    mean = np.stack([(labels == c).mean(axis=0) for c in range(class_count)])
    u = special.entr(mean).sum(axis=0) / np.log(class_count)
    return np.clip(u, 0.0, 1.0)


def image_level_uncertainty(u_map: np.ndarray, mean_mask: SegmentationMask) -> float:
    """Map total weighted by the predicted foreground size."""
    u_map = np.asarray(u_map, dtype=np.float64)
    if u_map.shape != mean_mask.shape:
        raise PropagationError(
            f"map shape {u_map.shape} differs from mask {mean_mask.shape}",
            "shape_mismatch",
        )
    return float(u_map.sum()) / max(1, mean_mask.foreground)
