"""Stage functions shared by the command line and the end-to-end pipeline."""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel

from .artifacts import atomic_write_text, write_csv, write_json
from .calibration import (
    CalibrationReport,
    dice_uncertainty_correlation,
    mutual_information,
    pixel_ece,
    reliability_table,
    segmentation_case_metrics,
    uce_equal_count,
    uncertainty_from_variance,
)
from .clinical import ImageKey, MetricKind, compute_metric, metric_function
from .errors import CasusError, PropagationError, ShapeModelError
from .geometry import (
    Contour,
    Frame,
    View,
    rasterize_contour,
    self_intersection_rate,
)
from .heatmap import ContourDistribution
from .propagation import (
    CaseSampler,
    UncertaintyDecomposition,
    apply_rejection,
    decompose,
    mean_prediction,
    prediction_interval,
    propagate,
)
from .records import (
    SampleRecord,
    contours_jsonl,
    index_by_image,
    pair_frames,
    predictions_jsonl,
)
from .sampler import RandomStream, stream_key
from .shape_model import ShapeModel, fit_pca
from .synth import SynthConfig, generate_population, generate_predictions


logger = logging.getLogger(__name__)

RELIABILITY_HEADER = ("bin_lo", "bin_hi", "mean_x", "mean_y", "count")

ReliabilityRows = List[Tuple[float, float, float, float, int]]


class SamplingSettings(BaseModel):
    """Per-run sampling options resolved from config, presets and flags."""

    epsilon2: float = 0.1
    t_aleatoric: int = 25
    temporal: bool = False
    aleatoric: bool = True
    n_disks: int = 20
    long_axis: str = "max"


class ReportRow(BaseModel):
    """One propagated metric case; statistics are empty for rejected cases."""

    case: str
    metric: MetricKind
    id: str
    images: List[str]
    mode: str = "aleatoric"
    prediction: Optional[float] = None
    mu: Optional[float] = None
    sigma2_aleatoric: Optional[float] = None
    sigma2_epistemic: Optional[float] = None
    sigma2: Optional[float] = None
    n_rejected_cells: int = 0
    rejected: bool = False


@dataclass
class MetricCase:
    """The images one metric value is computed from, for every prediction set."""

    label: str
    kind: MetricKind
    case_id: str
    keys: List[ImageKey]
    sets: List[Dict[ImageKey, ContourDistribution]] = field(default_factory=list)


def image_label(key: ImageKey) -> str:
    return f"{key[0].value}/{key[1].value}"


def parse_image_label(label: str) -> ImageKey:
    view, frame = label.split("/")
    return View(view), Frame(frame)


# --- Synthesis and fitting ---


def write_synth(cfg: SynthConfig, out_dir: Path) -> Dict[str, Path]:
    """Training contours, test truth and prediction files for one config."""
    out_dir = Path(out_dir)
    population = generate_population(cfg, split="train")
    truths = generate_population(cfg, split="test")
    preds = generate_predictions(truths, cfg)
    files = {
        "contours": atomic_write_text(
            out_dir / "contours.jsonl", contours_jsonl(population)
        ),
        "truth": atomic_write_text(out_dir / "truth.jsonl", contours_jsonl(truths)),
        "predictions": atomic_write_text(
            out_dir / "predictions.jsonl", predictions_jsonl(preds.predictions)
        ),
    }
    for e, dists in enumerate(preds.epistemic, 1):
        name = f"predictions_e{e:02d}"
        files[name] = atomic_write_text(
            out_dir / f"{name}.jsonl", predictions_jsonl(dists)
        )
    return files


def fit_shape_model(
    contours: Sequence[Contour],
    kind: str = "single",
    view: Optional[View] = None,
    frame: Optional[Frame] = None,
) -> ShapeModel:
    """Single-frame model over the selected contours, or the joint ED/ES model."""
    selected = [
        c
        for c in contours
        if (view is None or c.view is view) and (frame is None or c.frame is frame)
    ]
    if not selected:
        raise ShapeModelError("no contours match the requested view/frame", "no_shapes")
    k = selected[0].k
    if kind == "single":
        return fit_pca([c.as_vector() for c in selected], kind="single", k=k)
    if kind != "joint":
        raise ShapeModelError(f"unknown model kind {kind!r}")
    pairs = pair_frames(selected)
    shapes = [np.concatenate([ed.as_vector(), es.as_vector()]) for ed, es in pairs]
    return fit_pca(shapes, kind="joint", k=k)


# --- Sampling ---


def _by_case(
    dists: Sequence[ContourDistribution],
) -> Dict[str, Dict[ImageKey, ContourDistribution]]:
    by_case: Dict[str, Dict[ImageKey, ContourDistribution]] = {}
    for d in dists:
        by_case.setdefault(d.case_id, {})[(d.view, d.frame)] = d
    return by_case


def sample_records(
    dists: Sequence[ContourDistribution],
    n: int,
    seed: int,
    settings: SamplingSettings,
    shape_model: Optional[ShapeModel] = None,
    joint_model: Optional[ShapeModel] = None,
) -> List[SampleRecord]:
    """``n`` samples per image, grouped per case so temporal pairs stay joint."""
    records: List[SampleRecord] = []
    drawn_contours: List[Contour] = []
    for case_id, images in sorted(_by_case(dists).items()):
        sampler = CaseSampler(
            images,
            settings.epsilon2,
            shape_model=shape_model,
            joint_model=joint_model,
            temporal=settings.temporal,
        )
        rng = RandomStream(seed).child(stream_key(case_id))
        for i in range(n):
            drawn = sampler(rng.child(i))
            drawn_contours.extend(drawn.values())
            for key in sorted(drawn, key=image_label):
                records.append(
                    SampleRecord(
                        id=case_id,
                        view=key[0],
                        frame=key[1],
                        sample_index=i,
                        points=drawn[key].points.tolist(),
                    )
                )
    logger.info(
        "Sampled %d contours, self-intersection rate %.4f",
        len(drawn_contours),
        self_intersection_rate(drawn_contours),
    )
    return records


# --- Propagation ---


def _case_label(kind: MetricKind, case_id: str, key: ImageKey) -> Tuple[str, ...]:
    view, frame = key[0].value, key[1].value
    if kind is MetricKind.AREA:
        return (case_id, view, frame)
    if kind is MetricKind.FAC:
        return (case_id, view)
    if kind is MetricKind.VOLUME:
        return (case_id, frame)
    return (case_id,)


IMAGES_PER_CASE = {
    MetricKind.AREA: 1,
    MetricKind.FAC: 2,
    MetricKind.VOLUME: 2,
    MetricKind.EF: 4,
}


def build_metric_cases(
    kind: MetricKind, prediction_sets: Sequence[Sequence[ContourDistribution]]
) -> List[MetricCase]:
    """Group images into the metric's cases; a case must be complete in every set.

    Area cases are single images, FAC cases one view at both frames, volume
    cases both views at one frame and EF cases all four images of a patient.
    """
    kind = MetricKind(kind)
    indexes = [index_by_image(s) for s in prediction_sets]
    groups: Dict[Tuple[str, ...], List[ImageKey]] = {}
    for case_id, view, frame in indexes[0]:
        label = _case_label(kind, case_id, (view, frame))
        groups.setdefault(label, []).append((view, frame))

    cases = []
    for label in sorted(groups):
        keys = sorted(groups[label], key=image_label)
        case_id = label[0]
        complete = len(keys) == IMAGES_PER_CASE[kind] and all(
            (case_id, *key) in index for index in indexes for key in keys
        )
        if not complete:
            logger.warning("Skipping incomplete %s case %s", kind.value, "/".join(label))
            continue
        sets = [{key: index[(case_id, *key)] for key in keys} for index in indexes]
        cases.append(MetricCase("/".join(label), kind, case_id, keys, sets))
    return cases


def propagate_case(
    case: MetricCase,
    seed: int,
    settings: SamplingSettings,
    shape_model: Optional[ShapeModel] = None,
    joint_model: Optional[ShapeModel] = None,
    threads: int = 1,
    mode: str = "aleatoric",
) -> ReportRow:
    """Sample grid, rejection rules and decomposition for one metric case.

    The rule-1 prediction is the metric on the predicted mean contours,
    averaged over prediction sets.
    """
    metric = metric_function(case.kind, settings.n_disks, settings.long_axis)
    samplers = [
        CaseSampler(
            dists,
            settings.epsilon2,
            shape_model=shape_model,
            joint_model=joint_model,
            temporal=settings.temporal,
            aleatoric=settings.aleatoric,
        )
        for dists in case.sets
    ]
    t_aleatoric = settings.t_aleatoric if settings.aleatoric else 1
    rng = RandomStream(seed).child(stream_key(case.kind.value), stream_key(case.label))
    grid = propagate(metric, samplers, t_aleatoric, rng, case.kind, threads)

    predictions = []
    for dists in case.sets:
        try:
            predictions.append(mean_prediction(metric, dists))
        except CasusError as e:
            logger.warning("Prediction failed for %s: %s", case.label, e)
            predictions.append(float("nan"))
    prediction = float(np.mean(predictions))

    outcome = apply_rejection(grid, prediction)
    row = ReportRow(
        case=case.label,
        metric=case.kind,
        id=case.case_id,
        images=[image_label(k) for k in case.keys],
        mode=mode,
        prediction=prediction if np.isfinite(prediction) else None,
        n_rejected_cells=outcome.n_discarded,
        rejected=outcome.rejected,
    )
    if outcome.rejected:
        return row
    dec = decompose(outcome.grid)
    return row.model_copy(
        update={
            "mu": dec.mu,
            "sigma2_aleatoric": dec.sigma2_aleatoric,
            "sigma2_epistemic": dec.sigma2_epistemic,
            "sigma2": dec.sigma2,
        }
    )


def propagate_cases(
    cases: Sequence[MetricCase],
    seed: int,
    settings: SamplingSettings,
    shape_model: Optional[ShapeModel] = None,
    joint_model: Optional[ShapeModel] = None,
    threads: int = 1,
    mode: str = "aleatoric",
) -> List[ReportRow]:
    rows = [
        propagate_case(c, seed, settings, shape_model, joint_model, threads, mode)
        for c in cases
    ]
    n_rejected = sum(r.rejected for r in rows)
    logger.info("Propagated %d cases (%s), %d rejected", len(rows), mode, n_rejected)
    return rows


# --- Evaluation ---


def truth_value(
    row: ReportRow,
    truths: Mapping[Tuple[str, View, Frame], Contour],
    n_disks: int = 20,
    long_axis: str = "max",
) -> float:
    contours = {}
    for label in row.images:
        key = parse_image_label(label)
        try:
            contours[key] = truths[(row.id, *key)]
        except KeyError:
            raise PropagationError(
                f"no ground truth for {row.id} {label}", "missing_truth"
            ) from None
    return compute_metric(row.metric, contours, n_disks=n_disks, long_axis=long_axis)


@dataclass
class Evaluation:
    reports: Dict[str, CalibrationReport]
    reliability: Dict[str, ReliabilityRows]

    def to_dict(self) -> Dict[str, Any]:
        return {
            name: report.model_dump(mode="json")
            for name, report in sorted(self.reports.items())
        }


def evaluate_rows(
    rows: Sequence[ReportRow],
    truths: Sequence[Contour],
    bins: int = 10,
    use_variance: bool = False,
    scale: str = "expected-abs",
    n_disks: int = 20,
    long_axis: str = "max",
) -> Evaluation:
    """UCE, 95% interval coverage and error summaries per (mode, metric)."""
    truth_index: Any = index_by_image(truths)
    groups: Dict[str, List[ReportRow]] = {}
    for row in rows:
        groups.setdefault(f"{row.mode}/{row.metric.value}", []).append(row)

    reports: Dict[str, CalibrationReport] = {}
    reliability: Dict[str, ReliabilityRows] = {}
    for name in sorted(groups):
        group = groups[name]
        kept = [r for r in group if not r.rejected]
        report = CalibrationReport(
            metric=name,
            n_cases=len(kept),
            rejected_percent=100.0 * (len(group) - len(kept)) / len(group),
        )
        reports[name] = report
        if not kept:
            continue

        truth = np.array([truth_value(r, truth_index, n_disks, long_axis) for r in kept])
        mu = np.array([r.mu for r in kept], dtype=np.float64)
        sigma2 = np.array([r.sigma2 for r in kept], dtype=np.float64)
        errors = np.abs(mu - truth)
        intervals = [
            prediction_interval(
                UncertaintyDecomposition(r.mu, r.sigma2_aleatoric, r.sigma2_epistemic)
            )
            for r in kept
        ]
        report.coverage_95 = float(
            np.mean([lo <= t <= hi for (lo, hi), t in zip(intervals, truth)])
        )
        report.mean_abs_error = float(errors.mean())
        report.mean_sigma = float(np.sqrt(sigma2).mean())
        if len(kept) < bins:
            logger.warning("Too few cases for UCE on %s (%d < %d)", name, len(kept), bins)
            continue
        unc = uncertainty_from_variance(sigma2, use_variance, scale)
        report.uce, uce_bins = uce_equal_count(
            errors, unc, bins, ids=[r.case for r in kept]
        )
        reliability[f"uce_{name.replace('/', '_')}"] = reliability_table(uce_bins)
    return Evaluation(reports, reliability)


def evaluate_segmentation(
    predictions: Sequence[ContourDistribution],
    truths: Sequence[Contour],
    seed: int,
    settings: SamplingSettings,
    shape_model: ShapeModel,
    n_samples: int = 10,
    raster_size: int = 64,
    max_images: int = 50,
    bins: int = 10,
) -> Tuple[CalibrationReport, ReliabilityRows]:
    """Pixel ECE, uncertainty/error MI and Dice/uncertainty correlation."""
    truth_index: Any = index_by_image(truths)
    ordered = sorted(
        predictions, key=lambda d: (d.case_id, d.view.value, d.frame.value)
    )
    cases = []
    for dist in ordered[:max_images]:
        truth = truth_index.get((dist.case_id, dist.view, dist.frame))
        if truth is None:
            continue
        key = (dist.view, dist.frame)
        sampler = CaseSampler({key: dist}, settings.epsilon2, shape_model)
        rng = RandomStream(seed).child(
            stream_key("segmentation"), stream_key(dist.case_id + image_label(key))
        )
        masks = [
            rasterize_contour(sampler(rng.child(i))[key], raster_size, raster_size)
            for i in range(n_samples)
        ]
        mean_mask = rasterize_contour(dist.mean_contour(), raster_size, raster_size)
        truth_mask = rasterize_contour(truth, raster_size, raster_size)
        cases.append(segmentation_case_metrics(masks, mean_mask, truth_mask))
    if not cases:
        raise PropagationError("no images available for segmentation evaluation")

    ece_value, ece_bins = pixel_ece(cases, bins)
    report = CalibrationReport(metric="segmentation", n_cases=len(cases), ece=ece_value)
    report.mi = float(
        np.mean([mutual_information(c.uncertainty_map, c.error_map) for c in cases])
    )
    try:
        report.corr = dice_uncertainty_correlation(
            [c.dice for c in cases], [c.image_uncertainty for c in cases]
        )
    except CasusError as e:
        logger.warning("Dice/uncertainty correlation skipped: %s", e)
    report.extras["mean_dice"] = float(np.mean([c.dice for c in cases]))
    return report, reliability_table(ece_bins)


def write_evaluation(evaluation: Evaluation, out_dir: Path) -> List[Path]:
    """report.json plus one reliability CSV per binned metric."""
    out_dir = Path(out_dir)
    paths = [write_json(out_dir / "report.json", evaluation.to_dict())]
    for name, rows in sorted(evaluation.reliability.items()):
        paths.append(
            write_csv(out_dir / f"reliability_{name}.csv", RELIABILITY_HEADER, rows)
        )
    return paths
