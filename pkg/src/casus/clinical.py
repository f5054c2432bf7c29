"""Clinical metric functions mapping LV contours to scalars.

Areas are in mm², volumes in mL (mm³/1000), FAC and EF are fractions.
Contour coordinates are normalized and converted to millimetres with each
contour's spacing ([sy, sx] in mm per normalized unit) at this layer only.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, List, Mapping, Tuple

import numpy as np

from .errors import MetricError
from .geometry import Contour, Frame, View, shoelace_area


logger = logging.getLogger(__name__)

ImageKey = Tuple[View, Frame]

DEGENERATE_AREA = 1e-15


class MetricKind(str, Enum):
    AREA = "area"
    FAC = "fac"
    VOLUME = "volume"
    EF = "ef"

    @property
    def is_fraction(self) -> bool:
        return self in (MetricKind.FAC, MetricKind.EF)

    @property
    def unit(self) -> str:
        return {"area": "mm²", "volume": "mL"}.get(self.value, "fraction")


@dataclass(frozen=True)
class MetricValue:
    kind: MetricKind
    value: float
    valid: bool

    @classmethod
    def of(cls, kind: MetricKind, value: float) -> "MetricValue":
        """Areas and volumes must be positive; fractions must lie in (0, 1)."""
        kind = MetricKind(kind)
        value = float(value)
        if not np.isfinite(value):
            valid = False
        elif kind.is_fraction:
            valid = 0.0 < value < 1.0
        else:
            valid = value > 0.0
        return cls(kind, value, valid)


def _to_mm(contour: Contour) -> np.ndarray:
    sy, sx = contour.spacing_mm
    return contour.points * np.array([sx, sy])


def polygon_area(contour: Contour) -> float:
    """Area in mm² of the contour closed by its basal chord."""
    area = shoelace_area(contour.points)
    if area <= DEGENERATE_AREA:
        logger.warning("Degenerate polygon for case %r, area set to 0", contour.case_id)
        return 0.0
    sy, sx = contour.spacing_mm
    return area * sx * sy


def fac(area_ed: float, area_es: float) -> float:
    if not area_ed > 0:
        raise MetricError(f"ED area must be positive, got {area_ed}", "non_positive_ed")
    return (area_ed - area_es) / area_ed


def ef(vol_ed: float, vol_es: float) -> float:
    if not vol_ed > 0:
        raise MetricError(
            f"ED volume must be positive, got {vol_ed}", "non_positive_ed"
        )
    return (vol_ed - vol_es) / vol_ed


# --- Simpson biplane ---


def _long_axis(contour: Contour) -> Tuple[np.ndarray, np.ndarray, float]:
    pts = _to_mm(contour)
    base = 0.5 * (pts[contour.landmarks[0]] + pts[contour.landmarks[2]])
    axis = pts[contour.landmarks[1]] - base
    length = float(np.linalg.norm(axis))
    if length <= 1e-12:
        raise MetricError(
            f"apex coincides with basal midpoint (case {contour.case_id!r})", "zero_axis"
        )
    return pts, base, length


def chord_widths(contour: Contour, n_disks: int) -> Tuple[np.ndarray, float]:
    """Widths perpendicular to the long axis at levels (i + ½)/n, and the axis length.

    Each width spans the outermost intersections of the open contour polyline
    with the perpendicular line; levels with fewer than two hits have width 0.
    """
    pts, base, length = _long_axis(contour)
    u = (pts[contour.landmarks[1]] - base) / length
    n = np.array([-u[1], u[0]])
    along = (pts - base) @ u
    across = (pts - base) @ n

    heights = (np.arange(n_disks) + 0.5) / n_disks * length
    da = along[None, :-1] - heights[:, None]
    db = along[None, 1:] - heights[:, None]
    hit = (da * db <= 0) & (da != db)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(hit, da / (da - db), 0.0)
    pos = across[None, :-1] + s * (across[None, 1:] - across[None, :-1])
    hi = np.where(hit, pos, -np.inf).max(axis=1)
    lo = np.where(hit, pos, np.inf).min(axis=1)
    widths = np.where(hit.sum(axis=1) >= 2, hi - lo, 0.0)
    return widths, length


def simpson_biplane_volume(
    a4c: Contour, a2c: Contour, n_disks: int = 20, long_axis: str = "max"
) -> float:
    """Method of disks: V = (π/4)·(L/n)·Σ aᵢbᵢ, returned in mL."""
    if n_disks < 1:
        raise MetricError(f"n_disks must be >= 1, got {n_disks}", "bad_n_disks")
    if long_axis not in ("max", "mean"):
        raise MetricError(f"long_axis must be 'max' or 'mean', got {long_axis!r}")
    a, l4 = chord_widths(a4c, n_disks)
    b, l2 = chord_widths(a2c, n_disks)
    length = max(l4, l2) if long_axis == "max" else 0.5 * (l4 + l2)
    volume_mm3 = np.pi / 4.0 * (length / n_disks) * float(np.dot(a, b))
    return volume_mm3 / 1000.0


# --- Case-level metrics ---


def required_images(
    kind: MetricKind, view: View = View.A4C, frame: Frame = Frame.ED
) -> List[ImageKey]:
    """(view, frame) images one case of ``kind`` is computed from."""
    kind = MetricKind(kind)
    if kind is MetricKind.AREA:
        return [(View(view), Frame(frame))]
    if kind is MetricKind.FAC:
        return [(View(view), Frame.ED), (View(view), Frame.ES)]
    if kind is MetricKind.VOLUME:
        return [(View.A4C, Frame(frame)), (View.A2C, Frame(frame))]
    return [(v, f) for v in (View.A4C, View.A2C) for f in (Frame.ED, Frame.ES)]


def _single_view(contours: Mapping[ImageKey, Contour]) -> View:
    views = {v for v, _ in contours}
    if len(views) != 1:
        raise MetricError(f"expected one view, got {sorted(v.value for v in views)}")
    return views.pop()


def _single_frame(contours: Mapping[ImageKey, Contour]) -> Frame:
    frames = {f for _, f in contours}
    if len(frames) != 1:
        raise MetricError(f"expected one frame, got {sorted(f.value for f in frames)}")
    return frames.pop()


def _need(contours: Mapping[ImageKey, Contour], key: ImageKey) -> Contour:
    try:
        return contours[key]
    except KeyError:
        raise MetricError(
            f"missing {key[0].value}/{key[1].value} contour", "missing_image"
        ) from None


def compute_metric(
    kind: MetricKind,
    contours: Mapping[ImageKey, Contour],
    n_disks: int = 20,
    long_axis: str = "max",
) -> float:
    """Evaluate ``kind`` on a bundle of contours keyed by (view, frame)."""
    kind = MetricKind(kind)
    if kind is MetricKind.AREA:
        if len(contours) != 1:
            raise MetricError(f"area needs exactly one contour, got {len(contours)}")
        return polygon_area(next(iter(contours.values())))
    if kind is MetricKind.FAC:
        view = _single_view(contours)
        return fac(
            polygon_area(_need(contours, (view, Frame.ED))),
            polygon_area(_need(contours, (view, Frame.ES))),
        )

    def volume(frame: Frame) -> float:
        return simpson_biplane_volume(
            _need(contours, (View.A4C, frame)),
            _need(contours, (View.A2C, frame)),
            n_disks=n_disks,
            long_axis=long_axis,
        )

    if kind is MetricKind.VOLUME:
        return volume(_single_frame(contours))
    return ef(volume(Frame.ED), volume(Frame.ES))


MetricFn = Callable[[Mapping[ImageKey, Contour]], float]


def metric_function(
    kind: MetricKind, n_disks: int = 20, long_axis: str = "max"
) -> MetricFn:
    """Bind metric options; returns F(contours) -> float."""

    def _metric(contours: Mapping[ImageKey, Contour]) -> float:
        return compute_metric(kind, contours, n_disks=n_disks, long_axis=long_axis)

    return _metric
