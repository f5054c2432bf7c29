"""Calibration metrics for confidence and uncertainty estimates.

Covers ECE with equal-width bins, UCE with equal-count bins, uncertainty/error
mutual information, Dice/uncertainty correlation and reliability-table rows.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field
from scipy import stats

from .errors import CalibrationError
from .geometry import SegmentationMask, dice
from .propagation import entropy_map, image_level_uncertainty


logger = logging.getLogger(__name__)

UCE_SCALES = ("std", "expected-abs")


@dataclass(frozen=True)
class CalibrationBin:
    """Bin edges plus member means: mean_x is confidence or uncertainty,
    mean_y is accuracy or error."""

    lo: float
    hi: float
    count: int
    mean_x: float
    mean_y: float


class CalibrationReport(BaseModel):
    """Scalar calibration results for one metric kind."""

    metric: str
    n_cases: int = 0
    rejected_percent: float = 0.0
    ece: Optional[float] = None
    uce: Optional[float] = None
    mi: Optional[float] = None
    corr: Optional[float] = None
    coverage_95: Optional[float] = None
    mean_abs_error: Optional[float] = None
    mean_sigma: Optional[float] = None
    extras: Dict[str, float] = Field(default_factory=dict)


def _as_1d(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise CalibrationError(f"{name} is empty", "empty_input")
    if not np.all(np.isfinite(arr)):
        raise CalibrationError(f"{name} contains non-finite values", "non_finite")
    return arr


def _weighted_gap(bins: Sequence[CalibrationBin], n: int) -> float:
    return float(sum(b.count / n * abs(b.mean_y - b.mean_x) for b in bins if b.count))


def ece(
    confidences: Sequence[float], correctness: Sequence[float], m_bins: int = 10
) -> Tuple[float, List[CalibrationBin]]:
    """Σ_m (|B_m|/N)·|acc(B_m) − conf(B_m)| over equal-width bins on [0, 1].

    Bins are left-closed; confidence 1.0 falls into the last bin.
    """
    conf = _as_1d(confidences, "confidences")
    acc = _as_1d(correctness, "correctness")
    if conf.shape != acc.shape:
        raise CalibrationError("confidences and correctness differ in length")
    if np.any((conf < 0) | (conf > 1)):
        raise CalibrationError("confidences must lie in [0, 1]", "out_of_range")
    if m_bins < 1:
        raise CalibrationError(f"m_bins must be >= 1, got {m_bins}")

    idx = np.minimum((conf * m_bins).astype(int), m_bins - 1)
    bins = []
    for m in range(m_bins):
        members = idx == m
        count = int(np.count_nonzero(members))
        bins.append(
            CalibrationBin(
                lo=m / m_bins,
                hi=(m + 1) / m_bins,
                count=count,
                mean_x=float(conf[members].mean()) if count else 0.0,
                mean_y=float(acc[members].mean()) if count else 0.0,
            )
        )
    return _weighted_gap(bins, conf.size), bins


def uncertainty_from_variance(
    sigma2: Sequence[float], use_variance: bool = False, scale: str = "std"
) -> np.ndarray:
    """Uncertainty compared against |error|: σ, σ·√(2/π), or σ² when requested."""
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    if use_variance:
        return sigma2
    if scale not in UCE_SCALES:
        raise CalibrationError(f"unknown UCE scale {scale!r}", "bad_scale")
    sigma = np.sqrt(np.clip(sigma2, 0.0, None))
    return sigma * np.sqrt(2.0 / np.pi) if scale == "expected-abs" else sigma


def uce_equal_count(
    errors: Sequence[float],
    uncertainties: Sequence[float],
    m_bins: int = 10,
    ids: Optional[Sequence[str]] = None,
) -> Tuple[float, List[CalibrationBin]]:
    """Σ_m (|B_m|/N)·|err(B_m) − uncert(B_m)| over equal-count bins.

    Samples are sorted by (uncertainty, id); the remainder of N / m_bins goes
    to the leading bins.
    """
    err = _as_1d(errors, "errors")
    unc = _as_1d(uncertainties, "uncertainties")
    if err.shape != unc.shape:
        raise CalibrationError("errors and uncertainties differ in length")
    if np.any(unc < 0):
        raise CalibrationError("uncertainties must be non-negative", "out_of_range")
    if err.size < m_bins:
        raise CalibrationError(
            f"need at least {m_bins} samples for {m_bins} bins, got {err.size}",
            "too_few_samples",
        )
    keys = np.arange(err.size) if ids is None else np.asarray(ids)
    order = np.lexsort((keys, unc))
    bins = []
    for members in np.array_split(order, m_bins):
        bins.append(
            CalibrationBin(
                lo=float(unc[members].min()),
                hi=float(unc[members].max()),
                count=int(members.size),
                mean_x=float(unc[members].mean()),
                mean_y=float(err[members].mean()),
            )
        )
    return _weighted_gap(bins, err.size), bins


def mutual_information(
    unc_map: np.ndarray, err_map: np.ndarray, n_bins: int = 10
) -> float:
    """MI in nats between quantized uncertainty (equal-width on [0, 1]) and a
    binary error map."""
    unc = np.asarray(unc_map, dtype=np.float64)
    err = np.asarray(err_map)
    if unc.shape != err.shape:
        raise CalibrationError(
            f"map shapes differ: {unc.shape} vs {err.shape}", "shape_mismatch"
        )
    u_idx = np.clip((np.clip(unc, 0.0, 1.0) * n_bins).astype(int), 0, n_bins - 1)
    e_idx = (err.astype(np.float64) > 0.5).astype(int)
    joint = np.zeros((n_bins, 2))
    np.add.at(joint, (u_idx.reshape(-1), e_idx.reshape(-1)), 1.0)
    joint /= joint.sum()
    outer = joint.sum(axis=1, keepdims=True) * joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    return float(np.sum(joint[nz] * np.log(joint[nz] / outer[nz])))


def dice_uncertainty_correlation(
    dices: Sequence[float], uncertainties: Sequence[float]
) -> float:
    """Negated Pearson correlation; higher means better uncertainty ranking."""
    d = _as_1d(dices, "dices")
    u = _as_1d(uncertainties, "uncertainties")
    if d.shape != u.shape or d.size < 2:
        raise CalibrationError("need two equal-length sequences of at least 2 values")
    if np.ptp(d) == 0 or np.ptp(u) == 0:
        raise CalibrationError("correlation undefined for zero variance", "zero_variance")
    return -float(stats.pearsonr(d, u)[0])


def reliability_table(
    bins: Sequence[CalibrationBin],
) -> List[Tuple[float, float, float, float, int]]:
    """Rows (bin_lo, bin_hi, mean_x, mean_y, count) for non-empty bins."""
    return [(b.lo, b.hi, b.mean_x, b.mean_y, b.count) for b in bins if b.count]


# --- Segmentation-level evaluation ---


@dataclass(frozen=True, eq=False)
class SegmentationCaseMetrics:
    dice: float
    image_uncertainty: float
    uncertainty_map: np.ndarray
    error_map: np.ndarray


def segmentation_case_metrics(
    sample_masks: Sequence[SegmentationMask],
    mean_mask: SegmentationMask,
    truth_mask: SegmentationMask,
) -> SegmentationCaseMetrics:
    """Dice of the mean prediction, entropy map, its image-level summary and the
    pixel-wise error map of one image."""
    u_map = entropy_map(sample_masks)
    return SegmentationCaseMetrics(
        dice=dice(mean_mask, truth_mask),
        image_uncertainty=image_level_uncertainty(u_map, mean_mask),
        uncertainty_map=u_map,
        error_map=mean_mask.grid != truth_mask.grid,
    )


def pixel_ece(
    cases: Sequence[SegmentationCaseMetrics], m_bins: int = 10
) -> Tuple[float, List[CalibrationBin]]:
    """ECE over all pixels with confidence 1 − u and correctness 1 − error."""
    if not cases:
        raise CalibrationError("no segmentation cases", "empty_input")
    conf = np.concatenate([1.0 - c.uncertainty_map.reshape(-1) for c in cases])
    correct = np.concatenate([1.0 - c.error_map.reshape(-1) for c in cases])
    return ece(conf, correct, m_bins)
