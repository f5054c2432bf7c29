"""Dataset, prediction and heatmap file formats.

JSON Lines records are validated with pydantic and converted to the in-memory
contour types. Heatmap tensors use the little-endian CHM1 layout: magic,
u32 K, u32 H, u32 W, then K·H·W float32 values, row-major and point-major.
"""

import json
import logging
import struct
from pathlib import Path
from typing import (
    Dict,
    Iterable,
    List,
    Optional,
    Sequence,
    Tuple,
    Type,
    TypeVar,
    Union,
)

import numpy as np
from pydantic import BaseModel, ValidationError

from .errors import CasusError, HeatmapFileError, RecordError
from .geometry import Contour, Frame, View, validate_contour
from .heatmap import ContourDistribution, HeatmapStack, canonical_landmarks


logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
R = TypeVar("R", bound=BaseModel)

CHM_MAGIC = b"CHM1"
CHM_HEADER = struct.Struct("<4sIII")


class ContourRecord(BaseModel):
    """One contour line of contours.jsonl / truth.jsonl."""

    id: str
    view: View
    frame: Frame
    points: List[Tuple[float, float]]
    landmarks: Optional[Tuple[int, int, int]] = None
    spacing_mm: Optional[Tuple[float, float]] = None

    def to_contour(self) -> Contour:
        return validate_contour(
            self.points,
            self.landmarks or canonical_landmarks(len(self.points)),
            self.spacing_mm or (1.0, 1.0),
            self.view,
            self.frame,
            self.id,
        )

    @classmethod
    def from_contour(cls, contour: Contour) -> "ContourRecord":
        return cls(
            id=contour.case_id,
            view=contour.view,
            frame=contour.frame,
            points=contour.points.tolist(),
            landmarks=contour.landmarks,
            spacing_mm=contour.spacing_mm,
        )


class PredictionRecord(BaseModel):
    """Per-point predicted means and 2×2 covariances for one image."""

    id: str
    view: View
    frame: Frame
    points: List[Tuple[float, float]]
    covariances: List[Tuple[Tuple[float, float], Tuple[float, float]]]
    landmarks: Optional[Tuple[int, int, int]] = None
    spacing_mm: Optional[Tuple[float, float]] = None

    def to_distribution(self) -> ContourDistribution:
        if len(self.points) != len(self.covariances):
            raise RecordError(
                f"{self.id}: {len(self.points)} points but "
                f"{len(self.covariances)} covariances"
            )
        # reuse the contour rules for K, landmarks and spacing
        contour = validate_contour(
            self.points,
            self.landmarks or canonical_landmarks(len(self.points)),
            self.spacing_mm or (1.0, 1.0),
            self.view,
            self.frame,
            self.id,
        )
        return ContourDistribution(
            means=contour.points,
            covariances=np.asarray(self.covariances, dtype=np.float64),
            landmarks=contour.landmarks,
            view=contour.view,
            frame=contour.frame,
            case_id=contour.case_id,
            spacing_mm=contour.spacing_mm,
        )

    @classmethod
    def from_distribution(cls, dist: ContourDistribution) -> "PredictionRecord":
        return cls(
            id=dist.case_id,
            view=dist.view,
            frame=dist.frame,
            points=dist.means.tolist(),
            covariances=dist.covariances.tolist(),
            landmarks=dist.landmarks,
            spacing_mm=dist.spacing_mm,
        )


class SampleRecord(BaseModel):
    id: str
    view: View
    frame: Frame
    sample_index: int
    points: List[Tuple[float, float]]


# --- JSON Lines ---


def dumps_record(record: BaseModel) -> str:
    """Compact, key-sorted JSON; floats keep their shortest round-trip repr."""
    return json.dumps(record.model_dump(mode="json"), sort_keys=True)


def read_jsonl(path: PathLike, model: Type[R]) -> List[R]:
    records: List[R] = []
    try:
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    records.append(model.model_validate_json(line))
                except ValidationError as e:
                    raise RecordError(
                        f"{path}:{lineno}: invalid {model.__name__}: "
                        f"{e.errors()[0]['msg']}"
                    ) from e
    except FileNotFoundError as e:
        raise RecordError(f"file not found: {path}", "missing_file") from e
    logger.debug("Read %d %s records from %s", len(records), model.__name__, path)
    return records


def to_jsonl(records: Iterable[BaseModel]) -> str:
    return "".join(dumps_record(r) + "\n" for r in records)


def _convert(records, convert, path: PathLike):
    out = []
    for r in records:
        try:
            out.append(convert(r))
        except CasusError as e:
            where = f"{r.id!r} {r.view.value}/{r.frame.value}"
            raise RecordError(f"{path}: record {where}: {e.message}", e.code) from e
    return out


def _check_constant_k(items: Sequence, path: PathLike) -> None:
    ks = {item.k for item in items}
    if len(ks) > 1:
        raise RecordError(f"{path}: mixed point counts {sorted(ks)}", "mixed_k")


def read_contours(path: PathLike) -> List[Contour]:
    contours = _convert(read_jsonl(path, ContourRecord), ContourRecord.to_contour, path)
    _check_constant_k(contours, path)
    return contours


def read_predictions(path: PathLike) -> List[ContourDistribution]:
    dists = _convert(
        read_jsonl(path, PredictionRecord), PredictionRecord.to_distribution, path
    )
    _check_constant_k(dists, path)
    return dists


def contours_jsonl(contours: Iterable[Contour]) -> str:
    return to_jsonl(ContourRecord.from_contour(c) for c in contours)


def predictions_jsonl(dists: Iterable[ContourDistribution]) -> str:
    return to_jsonl(PredictionRecord.from_distribution(d) for d in dists)


ImageId = Tuple[str, View, Frame]


def index_by_image(items: Iterable) -> Dict[ImageId, object]:
    """Map (case id, view, frame) to contour or distribution; duplicates rejected."""
    index: Dict[ImageId, object] = {}
    for item in items:
        key = (item.case_id, item.view, item.frame)
        if key in index:
            raise RecordError(
                f"duplicate record for {key[0]} {key[1].value}/{key[2].value}",
                "duplicate",
            )
        index[key] = item
    return index


def pair_frames(contours: Iterable[Contour]) -> List[Tuple[Contour, Contour]]:
    """(ED, ES) pairs per (id, view); unpaired records raise listing their ids."""
    index = index_by_image(contours)
    groups = sorted(
        {(cid, view) for cid, view, _ in index}, key=lambda g: (g[0], g[1].value)
    )
    missing = [
        f"{cid}/{view.value}"
        for cid, view in groups
        if (cid, view, Frame.ED) not in index or (cid, view, Frame.ES) not in index
    ]
    if missing:
        raise RecordError(f"missing ED/ES pairs for: {', '.join(missing)}", "unpaired")
    return [
        (index[(cid, view, Frame.ED)], index[(cid, view, Frame.ES)])  # type: ignore[misc]
        for cid, view in groups
    ]


# --- CHM1 heatmap tensors ---


def heatmap_bytes(stack: HeatmapStack) -> bytes:
    k, h, w = stack.grids.shape
    return CHM_HEADER.pack(CHM_MAGIC, k, h, w) + stack.grids.astype("<f4").tobytes()


def parse_heatmap_bytes(data: bytes) -> HeatmapStack:
    if len(data) < 4 or data[:4] != CHM_MAGIC:
        raise HeatmapFileError(f"bad magic {data[:4]!r}", 0, "bad_magic")
    if len(data) < CHM_HEADER.size:
        raise HeatmapFileError("truncated header", len(data), "truncated")
    _, k, h, w = CHM_HEADER.unpack_from(data)
    if k == 0:
        raise HeatmapFileError("empty stack", 4, "empty_stack")
    if h == 0 or w == 0:
        raise HeatmapFileError(f"empty grid {h}x{w}", 8, "empty_grid")
    expected = CHM_HEADER.size + 4 * k * h * w
    if len(data) < expected:
        raise HeatmapFileError(
            f"truncated data: expected {expected} bytes, got {len(data)}",
            len(data),
            "truncated",
        )
    if len(data) > expected:
        raise HeatmapFileError("trailing bytes after data", expected, "trailing_data")
    values = np.frombuffer(data, dtype="<f4", count=k * h * w, offset=CHM_HEADER.size)
    return HeatmapStack(values.astype(np.float64).reshape(k, h, w))


def read_heatmap_file(path: PathLike) -> HeatmapStack:
    return parse_heatmap_bytes(Path(path).read_bytes())
