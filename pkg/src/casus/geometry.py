"""Contour and mask primitives shared by all other modules.

Coordinates are normalized to [-1, 1]: x is the column axis, y the row axis.
A contour is closed for area and filling purposes by the straight basal chord
from its last point back to its first.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence, Tuple

import numpy as np

from .errors import ContourValidationError


logger = logging.getLogger(__name__)


class View(str, Enum):
    A2C = "A2C"
    A4C = "A4C"


class Frame(str, Enum):
    ED = "ED"
    ES = "ES"


Landmarks = Tuple[int, int, int]


@dataclass(frozen=True, eq=False)
class Contour:
    """K ordered 2D points with (basal1, apex, basal2) landmark indices."""

    points: np.ndarray
    landmarks: Landmarks
    spacing_mm: Tuple[float, float] = (1.0, 1.0)
    view: View = View.A4C
    frame: Frame = Frame.ED
    case_id: str = ""

    def __post_init__(self):
        object.__setattr__(
            self, "points", np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        )
        object.__setattr__(self, "landmarks", tuple(int(i) for i in self.landmarks))
        object.__setattr__(
            self, "spacing_mm", tuple(float(s) for s in self.spacing_mm)
        )

    @property
    def k(self) -> int:
        return self.points.shape[0]

    @property
    def apex(self) -> np.ndarray:
        return self.points[self.landmarks[1]]

    @property
    def basal_mid(self) -> np.ndarray:
        return 0.5 * (self.points[self.landmarks[0]] + self.points[self.landmarks[2]])

    def as_vector(self) -> np.ndarray:
        """Interleaved shape vector [x0, y0, x1, y1, ...]."""
        return self.points.reshape(-1).copy()

    def with_points(self, points: np.ndarray) -> "Contour":
        return Contour(
            points=points,
            landmarks=self.landmarks,
            spacing_mm=self.spacing_mm,
            view=self.view,
            frame=self.frame,
            case_id=self.case_id,
        )


@dataclass(frozen=True, eq=False)
class SegmentationMask:
    """Binary H×W foreground map; ``degenerate`` flags zero-area sources."""

    grid: np.ndarray
    class_count: int = 2
    degenerate: bool = field(default=False)

    def __post_init__(self):
        grid = np.asarray(self.grid)
        if grid.ndim != 2 or grid.shape[0] == 0 or grid.shape[1] == 0:
            raise ValueError(f"mask must be a non-empty 2D grid, got {grid.shape}")
        if grid.dtype != bool:
            if not np.all((grid == 0) | (grid == 1)):
                raise ValueError("mask values must be 0 or 1")
            grid = grid.astype(bool)
        object.__setattr__(self, "grid", grid)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.grid.shape

    @property
    def foreground(self) -> int:
        return int(np.count_nonzero(self.grid))


# --- Segment intersection ---


def _orient(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    return (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (
        b[..., 1] - a[..., 1]
    ) * (c[..., 0] - a[..., 0])


def _on_segment(a, b, p, eps):
    return (
        (np.minimum(a[..., 0], b[..., 0]) - eps <= p[..., 0])
        & (p[..., 0] <= np.maximum(a[..., 0], b[..., 0]) + eps)
        & (np.minimum(a[..., 1], b[..., 1]) - eps <= p[..., 1])
        & (p[..., 1] <= np.maximum(a[..., 1], b[..., 1]) + eps)
    )


def segments_intersect(p1, p2, q1, q2, eps: float = 1e-12) -> np.ndarray:
    """Vectorized closed-segment intersection test (touching counts)."""
    o1 = _orient(p1, p2, q1)
    o2 = _orient(p1, p2, q2)
    o3 = _orient(q1, q2, p1)
    o4 = _orient(q1, q2, p2)
    proper = (o1 * o2 < 0) & (o3 * o4 < 0)
    touch = (
        ((np.abs(o1) <= eps) & _on_segment(p1, p2, q1, eps))
        | ((np.abs(o2) <= eps) & _on_segment(p1, p2, q2, eps))
        | ((np.abs(o3) <= eps) & _on_segment(q1, q2, p1, eps))
        | ((np.abs(o4) <= eps) & _on_segment(q1, q2, p2, eps))
    )
    return proper | touch


def is_simple_polyline(points: np.ndarray, closed: bool = False) -> bool:
    """True when no two non-adjacent segments of the polyline meet.

    With ``closed`` the basal chord from the last point back to the first is
    one more segment, adjacent to the first and last wall segments.
    """
    points = np.asarray(points, dtype=np.float64)
    starts, ends = points[:-1], points[1:]
    if closed:
        starts = np.vstack([starts, points[-1:]])
        ends = np.vstack([ends, points[:1]])
    n_seg = starts.shape[0]
    if n_seg < 3:
        return True
    i, j = np.triu_indices(n_seg, k=2)
    if closed:
        keep = ~((i == 0) & (j == n_seg - 1))
        i, j = i[keep], j[keep]
    return not bool(np.any(segments_intersect(starts[i], ends[i], starts[j], ends[j])))


def self_intersection_rate(contours: Iterable[Contour]) -> float:
    """Fraction of contours whose closed outline crosses itself."""
    flags = [not is_simple_polyline(c.points, closed=True) for c in contours]
    return float(np.mean(flags)) if flags else 0.0


# --- Validation ---


def validate_contour(
    points: Sequence[Sequence[float]],
    landmarks: Sequence[int],
    spacing: Sequence[float] = (1.0, 1.0),
    view: View = View.A4C,
    frame: Frame = Frame.ED,
    case_id: str = "",
) -> Contour:
    """Build a Contour, raising ContourValidationError on any rule violation."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ContourValidationError(
            f"points must have shape (K, 2), got {pts.shape}", "bad_shape"
        )
    if not np.all(np.isfinite(pts)):
        raise ContourValidationError("points contain non-finite values", "non_finite")
    k = pts.shape[0]
    if k % 2 == 0:
        raise ContourValidationError(f"even point count ({k})", "even_point_count")
    if k < 5:
        raise ContourValidationError(f"too few points ({k} < 5)", "too_few_points")

    lm = tuple(int(i) for i in landmarks)
    if len(lm) != 3:
        raise ContourValidationError("exactly three landmarks required", "landmarks")
    if len(set(lm)) != 3:
        raise ContourValidationError(f"duplicate landmarks {lm}", "duplicate_landmarks")
    if any(i < 0 or i >= k for i in lm):
        raise ContourValidationError(
            f"landmarks {lm} out of range for K={k}", "landmark_out_of_range"
        )
    if not lm[0] < lm[1] < lm[2]:
        raise ContourValidationError(
            f"landmarks {lm} must satisfy basal1 < apex < basal2", "landmark_order"
        )

    sp = tuple(float(s) for s in spacing)
    if len(sp) != 2 or not all(s > 0 and np.isfinite(s) for s in sp):
        raise ContourValidationError(f"invalid spacing {sp}", "bad_spacing")

    if not is_simple_polyline(pts):
        raise ContourValidationError("self-intersection", "self_intersection")

    return Contour(
        points=pts,
        landmarks=lm,
        spacing_mm=sp,
        view=View(view),
        frame=Frame(frame),
        case_id=case_id,
    )


# --- Area and resampling ---


def shoelace_area(points: np.ndarray) -> float:
    """Unsigned area of the closed polygon through ``points``."""
    pts = np.asarray(points, dtype=np.float64)
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def resample_arc_length(polyline: np.ndarray, n: int) -> np.ndarray:
    """``n`` points spaced uniformly by arc length, endpoints kept."""
    polyline = np.asarray(polyline, dtype=np.float64)
    seg = np.linalg.norm(np.diff(polyline, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    if s[-1] == 0:
        return np.repeat(polyline[:1], n, axis=0)
    target = np.linspace(0.0, s[-1], n)
    return np.column_stack(
        [np.interp(target, s, polyline[:, 0]), np.interp(target, s, polyline[:, 1])]
    )


def contour_from_polyline(
    polyline: np.ndarray, apex_index: int, k: int = 21
) -> Tuple[np.ndarray, Landmarks]:
    """Resample a dense basal1→apex→basal2 polyline to K points.

    Each half is resampled separately so the apex lands on index (K-1)/2.
    """
    if k % 2 == 0 or k < 5:
        raise ContourValidationError(f"K must be odd and >= 5, got {k}", "bad_k")
    half = (k + 1) // 2
    first = resample_arc_length(polyline[: apex_index + 1], half)
    second = resample_arc_length(polyline[apex_index:], half)
    points = np.vstack([first, second[1:]])
    return points, (0, (k - 1) // 2, k - 1)


# --- Rasterization and overlap ---


def pixel_centers(h: int, w: int) -> Tuple[np.ndarray, np.ndarray]:
    """Normalized (x, y) centers of an H×W grid, matching the coordinate maps."""
    xs = (2.0 * np.arange(1, w + 1) - (w + 1)) / w
    ys = (2.0 * np.arange(1, h + 1) - (h + 1)) / h
    return np.meshgrid(xs, ys)


def _points_in_polygon(px: np.ndarray, py: np.ndarray, poly: np.ndarray) -> np.ndarray:
    inside = np.zeros(px.shape, dtype=bool)
    on_edge = np.zeros(px.shape, dtype=bool)
    n = poly.shape[0]
    eps = 1e-12
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        crosses = (y1 > py) != (y2 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (px < x_at)
        # boundary pixels count as inside
        cross = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
        within = (
            (px >= min(x1, x2) - eps)
            & (px <= max(x1, x2) + eps)
            & (py >= min(y1, y2) - eps)
            & (py <= max(y1, y2) + eps)
        )
        on_edge |= (np.abs(cross) <= eps) & within
    return inside | on_edge


def rasterize_contour(contour: Contour, h: int, w: int) -> SegmentationMask:
    """Fill the closed contour polygon on an H×W grid (even-odd rule).

    Pixels whose centers lie inside or on the boundary are foreground.
    """
    if h < 8 or w < 8:
        raise ValueError(f"grid must be at least 8x8, got {h}x{w}")
    if shoelace_area(contour.points) <= 1e-15:
        logger.warning("Degenerate contour %s rasterized to empty mask", contour.case_id)
        return SegmentationMask(np.zeros((h, w), dtype=bool), degenerate=True)
    px, py = pixel_centers(h, w)
    return SegmentationMask(_points_in_polygon(px, py, contour.points))


def dice(a: SegmentationMask, b: SegmentationMask) -> float:
    """Dice overlap 2|A∩B| / (|A|+|B|); two empty masks score 1."""
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = a.foreground + b.foreground
    if total == 0:
        return 1.0
    return 2.0 * float(np.count_nonzero(a.grid & b.grid)) / total
