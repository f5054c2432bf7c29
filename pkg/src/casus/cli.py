"""Command line interface for the CASUS toolkit."""

import argparse
import asyncio
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from .artifacts import RunRecorder, atomic_write_text, write_json
from .clinical import MetricKind
from .config import config
from .errors import CasusError
from .experiments import (
    ReportRow,
    SamplingSettings,
    build_metric_cases,
    evaluate_rows,
    fit_shape_model,
    propagate_cases,
    sample_records,
    write_evaluation,
    write_synth,
)
from .geometry import Frame, View
from .heatmap import extract_distribution
from .pipeline import ALL_METRICS, CasusPipeline
from .records import (
    predictions_jsonl,
    read_contours,
    read_heatmap_file,
    read_jsonl,
    read_predictions,
    to_jsonl,
)
from .shape_model import ShapeModel
from .synth import PresetManager, load_synth_config


logger = logging.getLogger(__name__)


def _flags(args: argparse.Namespace) -> Dict[str, Any]:
    return {k: v for k, v in vars(args).items() if k != "func"}


def _threads(args: argparse.Namespace) -> int:
    forced = config.threads_override()
    return forced if forced is not None else args.threads


def _settings(args: argparse.Namespace) -> SamplingSettings:
    return SamplingSettings(
        epsilon2=args.epsilon2,
        t_aleatoric=getattr(args, "t_aleatoric", config.sampling.t_aleatoric),
        temporal=args.temporal,
        aleatoric=not getattr(args, "epistemic_only", False),
        n_disks=args.n_disks,
        long_axis=args.long_axis,
    )


def _load_models(args: argparse.Namespace):
    shape_model = ShapeModel.load(args.shape_model) if args.shape_model else None
    joint_model = ShapeModel.load(args.joint_model) if args.joint_model else None
    if args.temporal and joint_model is None:
        raise CasusError("--temporal requires --joint-model", "missing_model")
    if shape_model is None and joint_model is None:
        raise CasusError("--shape-model or --joint-model is required", "missing_model")
    return shape_model, joint_model


def _finish(recorder: RunRecorder, outputs: Sequence[Path], out_dir: Path) -> None:
    for path in outputs:
        recorder.add_output(path)
        print(path)
    recorder.write(out_dir)


# --- Subcommands ---


def cmd_synth(args: argparse.Namespace) -> int:
    cfg = load_synth_config(args.config)
    if args.seed is not None:
        cfg = cfg.model_copy(update={"seed": args.seed})
    recorder = RunRecorder("synth", _flags(args), cfg.seed)
    if args.config and Path(args.config).is_file():
        recorder.add_inputs([args.config])
    files = write_synth(cfg, args.out_dir)
    _finish(recorder, list(files.values()), args.out_dir)
    return 0


def cmd_fit_shape_model(args: argparse.Namespace) -> int:
    recorder = RunRecorder("fit-shape-model", _flags(args))
    recorder.add_inputs([args.contours])
    contours = read_contours(args.contours)
    view = View(args.view) if args.view else None
    frame = Frame(args.frame) if args.frame else None
    model = fit_shape_model(contours, args.kind, view, frame)
    logger.info(
        "Fitted %s model: dim %d, rank %d, from %d contours",
        model.kind,
        model.dim,
        model.rank,
        len(contours),
    )
    out = atomic_write_text(args.out, model.to_json())
    _finish(recorder, [out], out.parent)
    return 0


def cmd_moments(args: argparse.Namespace) -> int:
    recorder = RunRecorder("moments", _flags(args))
    recorder.add_inputs([args.heatmaps])
    dist = extract_distribution(
        read_heatmap_file(args.heatmaps),
        view=View(args.view),
        frame=Frame(args.frame),
        case_id=args.id,
        spacing_mm=tuple(args.spacing_mm),
    )
    out = atomic_write_text(args.out, predictions_jsonl([dist]))
    _finish(recorder, [out], out.parent)
    return 0


def cmd_sample(args: argparse.Namespace) -> int:
    seed = args.seed if args.seed is not None else config.runtime.seed
    recorder = RunRecorder("sample", _flags(args), seed)
    recorder.add_inputs(
        [p for p in (args.predictions, args.shape_model, args.joint_model) if p]
    )
    shape_model, joint_model = _load_models(args)
    records = sample_records(
        read_predictions(args.predictions),
        args.n,
        seed,
        _settings(args),
        shape_model,
        joint_model,
    )
    out = atomic_write_text(args.out, to_jsonl(records))
    _finish(recorder, [out], out.parent)
    return 0


def cmd_propagate(args: argparse.Namespace) -> int:
    seed = args.seed if args.seed is not None else config.runtime.seed
    files = [f for f in args.predictions.split(",") if f]
    if len(files) > args.t_epistemic:
        logger.info(
            "Using the first %d of %d prediction files", args.t_epistemic, len(files)
        )
        files = files[: args.t_epistemic]
    recorder = RunRecorder("propagate", _flags(args), seed)
    recorder.add_inputs(files + [p for p in (args.shape_model, args.joint_model) if p])
    shape_model, joint_model = _load_models(args)
    settings = _settings(args)
    cases = build_metric_cases(
        MetricKind(args.metric), [read_predictions(f) for f in files]
    )
    if not settings.aleatoric:
        mode = "epistemic"
    else:
        mode = "combined" if len(files) > 1 else "aleatoric"
    rows = propagate_cases(
        cases, seed, settings, shape_model, joint_model, _threads(args), mode
    )
    out = atomic_write_text(args.out, to_jsonl(rows))
    _finish(recorder, [out], out.parent)
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    recorder = RunRecorder("evaluate", _flags(args))
    recorder.add_inputs([args.report_in, args.ground_truth])
    evaluation = evaluate_rows(
        read_jsonl(args.report_in, ReportRow),
        read_contours(args.ground_truth),
        args.bins,
        args.use_variance,
        args.uce_scale,
        args.n_disks,
        args.long_axis,
    )
    outputs = write_evaluation(evaluation, args.out_dir)
    _finish(recorder, outputs, args.out_dir)
    return 0


def cmd_end_to_end(args: argparse.Namespace) -> int:
    preset = args.config or PresetManager().get_default_preset()
    cfg = load_synth_config(preset)
    seed = args.seed if args.seed is not None else cfg.seed
    sampling = dict(config.sampling.model_dump())
    if not Path(preset).is_file():
        sampling.update(PresetManager().get_sampling_overrides(preset))
    for name in ("epsilon2", "t_aleatoric", "t_epistemic"):
        if getattr(args, name) is not None:
            sampling[name] = getattr(args, name)
    settings = SamplingSettings(
        epsilon2=sampling["epsilon2"],
        t_aleatoric=sampling["t_aleatoric"],
        temporal=args.temporal,
        n_disks=args.n_disks,
        long_axis=args.long_axis,
    )

    recorder = RunRecorder("end-to-end", _flags(args), seed)
    if Path(preset).is_file():
        recorder.add_inputs([preset])
    result = asyncio.run(
        CasusPipeline().run(
            cfg,
            args.out_dir,
            seed=seed,
            threads=_threads(args),
            sampling=settings,
            t_epistemic=int(sampling["t_epistemic"]),
            metrics=args.metrics.split(","),
            bins=args.bins,
            raster_size=args.raster_size,
        )
    )
    if not result["success"]:
        raise CasusError(result["error"], "pipeline_failed")
    summary = write_json(Path(args.out_dir) / "summary.json", result["metadata"])
    outputs = [Path(p) for p in result["files"].values()] + [summary]
    _finish(recorder, outputs, args.out_dir)
    return 0


# --- Parser ---


def _add_sampling_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--shape-model", type=Path, help="single-frame shape model JSON")
    p.add_argument("--joint-model", type=Path, help="joint ED/ES shape model JSON")
    p.add_argument("--temporal", action="store_true", help="sample ED/ES jointly")
    p.add_argument("--epsilon2", type=float, default=config.sampling.epsilon2)


def _add_metric_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--n-disks", type=int, default=config.sampling.n_disks)
    p.add_argument(
        "--long-axis", choices=["max", "mean"], default=config.sampling.long_axis
    )


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--debug", action="store_true", help="Enable debug logging")
    common.add_argument("--seed", type=int, default=None, help="root random seed")
    common.add_argument(
        "--threads",
        type=int,
        default=config.runtime.threads,
        help="worker threads (CASUS_THREADS overrides)",
    )

    parser = argparse.ArgumentParser(
        prog="casus",
        description="Contour uncertainty sampling and propagation to clinical metrics",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--config", help="synth config JSON file or preset name")
    p.add_argument("--out-dir", type=Path, required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser(
        "fit-shape-model", parents=[common], help="fit a PCA shape model"
    )
    p.add_argument("--contours", type=Path, required=True)
    p.add_argument("--kind", choices=["single", "joint"], default="single")
    p.add_argument("--view", choices=[v.value for v in View])
    p.add_argument("--frame", choices=[f.value for f in Frame])
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_fit_shape_model)

    p = sub.add_parser(
        "moments", parents=[common], help="extract point Gaussians from heatmaps"
    )
    p.add_argument("--heatmaps", type=Path, required=True, help="CHM1 tensor file")
    p.add_argument("--id", default="case")
    p.add_argument("--view", choices=[v.value for v in View], default=View.A4C.value)
    p.add_argument(
        "--frame", choices=[f.value for f in Frame], default=Frame.ED.value
    )
    p.add_argument("--spacing-mm", type=float, nargs=2, default=[1.0, 1.0])
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_moments)

    p = sub.add_parser("sample", parents=[common], help="draw contour samples")
    p.add_argument("--predictions", type=Path, required=True)
    _add_sampling_flags(p)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_sample, n_disks=20, long_axis="max")

    p = sub.add_parser(
        "propagate", parents=[common], help="propagate uncertainty to a metric"
    )
    p.add_argument(
        "--predictions", required=True, help="prediction files, comma separated"
    )
    _add_sampling_flags(p)
    _add_metric_flags(p)
    p.add_argument("--metric", choices=ALL_METRICS, required=True)
    p.add_argument("--t-aleatoric", type=int, default=config.sampling.t_aleatoric)
    p.add_argument("--t-epistemic", type=int, default=config.sampling.t_epistemic)
    p.add_argument(
        "--epistemic-only",
        action="store_true",
        help="use the predicted mean contours without aleatoric sampling",
    )
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_propagate)

    p = sub.add_parser("evaluate", parents=[common], help="calibration metrics")
    p.add_argument("--report-in", type=Path, required=True)
    p.add_argument("--ground-truth", type=Path, required=True)
    p.add_argument("--bins", type=int, default=config.calibration.bins)
    p.add_argument(
        "--uce-scale",
        choices=["std", "expected-abs"],
        default=config.calibration.uce_scale,
    )
    p.add_argument(
        "--use-variance",
        action="store_true",
        default=config.calibration.uce_use_variance,
        help="bin on variance instead of standard deviation",
    )
    _add_metric_flags(p)
    p.add_argument("--out-dir", type=Path, required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser(
        "end-to-end", parents=[common], help="synth, fit, propagate and evaluate"
    )
    p.add_argument("--config", help="synth config JSON file or preset name")
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--metrics", default=",".join(ALL_METRICS))
    p.add_argument("--bins", type=int, default=config.calibration.bins)
    p.add_argument("--epsilon2", type=float)
    p.add_argument("--t-aleatoric", type=int)
    p.add_argument("--t-epistemic", type=int)
    p.add_argument("--temporal", action="store_true")
    p.add_argument("--raster-size", type=int, default=config.runtime.raster_size)
    _add_metric_flags(p)
    p.set_defaults(func=cmd_end_to_end)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point."""
    args = build_parser().parse_args(argv)

    logging.basicConfig(
        level=getattr(logging, config.runtime.log_level.upper(), logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=[logging.StreamHandler(sys.stderr)],
    )
    if args.debug:
        logging.getLogger().setLevel(logging.DEBUG)

    try:
        return args.func(args)
    except CasusError as e:
        logger.error(f"{args.command} failed [{e.code}]: {e.message}")
        return 1
    except ValueError as e:
        logger.error(f"{args.command} failed: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
