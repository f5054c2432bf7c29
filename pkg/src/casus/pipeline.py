"""LangGraph pipeline for the end-to-end synthetic experiment."""

import asyncio
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, TypedDict

from langgraph.graph import END, StateGraph
from langsmith import traceable

from .artifacts import atomic_write_text
from .clinical import MetricKind
from .config import config
from .errors import CasusError
from .experiments import (
    Evaluation,
    ReportRow,
    SamplingSettings,
    build_metric_cases,
    evaluate_rows,
    evaluate_segmentation,
    fit_shape_model,
    propagate_cases,
    write_evaluation,
    write_synth,
)
from .records import read_contours, read_predictions, to_jsonl
from .shape_model import ShapeModel
from .synth import SynthConfig


logger = logging.getLogger(__name__)

ALL_METRICS = [kind.value for kind in MetricKind]


class RunState(TypedDict):
    """State for the end-to-end pipeline."""

    synth_config: SynthConfig
    out_dir: str
    seed: int
    threads: int
    sampling: SamplingSettings
    t_epistemic: int
    metrics: List[str]
    bins: int
    raster_size: int
    files: Dict[str, str]
    models: Dict[str, ShapeModel]
    rows: List[ReportRow]
    report: Dict[str, Any]
    metadata: Dict[str, Any]
    error: Optional[str]


class CasusPipeline:
    """synth → fit → propagate → evaluate as a LangGraph state graph."""

    def __init__(self):
        if config.langsmith.tracing_enabled and config.langsmith.api_key:
            os.environ["LANGCHAIN_TRACING_V2"] = "true"
            os.environ["LANGCHAIN_ENDPOINT"] = config.langsmith.endpoint
            os.environ["LANGCHAIN_API_KEY"] = config.langsmith.api_key
            os.environ["LANGCHAIN_PROJECT"] = config.langsmith.project

        self.graph = self._build_graph()

    # --- Graph Definition ---

    def _build_graph(self):
        workflow = StateGraph(RunState)

        workflow.add_node("validate_input", self._validate_input)
        workflow.add_node("synthesize", self._synthesize)
        workflow.add_node("fit_models", self._fit_models)
        workflow.add_node("propagate", self._propagate)
        workflow.add_node("evaluate", self._evaluate)
        workflow.add_node("handle_error", self._handle_error)

        workflow.set_entry_point("validate_input")

        stages = ["validate_input", "synthesize", "fit_models", "propagate", "evaluate"]
        for stage, following in zip(stages, stages[1:] + [END]):
            workflow.add_conditional_edges(
                stage,
                self._should_continue,
                {"continue": following, "error": "handle_error"},
            )
        workflow.add_edge("handle_error", END)

        return workflow.compile()

    # --- Graph Node Methods ---

    @traceable(name="validate_input")
    async def _validate_input(self, state: RunState) -> RunState:
        unknown = [m for m in state["metrics"] if m not in ALL_METRICS]
        sampling = state["sampling"]
        if unknown:
            state["error"] = f"Unknown metrics: {', '.join(unknown)}"
        elif state["bins"] < 1:
            state["error"] = "bins must be at least 1"
        elif state["threads"] < 1:
            state["error"] = "threads must be at least 1"
        elif sampling.t_aleatoric < 1 or state["t_epistemic"] < 1:
            state["error"] = "t_aleatoric and t_epistemic must be at least 1"
        elif sampling.epsilon2 <= 0:
            state["error"] = "epsilon2 must be positive"
        return state

    @traceable(name="synthesize")
    async def _synthesize(self, state: RunState) -> RunState:
        cfg = state["synth_config"].model_copy(update={"seed": state["seed"]})
        try:
            files = await asyncio.to_thread(write_synth, cfg, Path(state["out_dir"]))
            state["files"] = {name: str(path) for name, path in files.items()}
        except (CasusError, ValueError) as e:
            logger.error(f"Synthesis failed: {e}")
            state["error"] = f"Synthesis error: {e}"
        return state

    @traceable(name="fit_models")
    async def _fit_models(self, state: RunState) -> RunState:
        out_dir = Path(state["out_dir"])

        def _fit() -> Dict[str, ShapeModel]:
            contours = read_contours(state["files"]["contours"])
            models = {
                "single": fit_shape_model(contours, "single"),
                "joint": fit_shape_model(contours, "joint"),
            }
            for kind, model in models.items():
                path = atomic_write_text(
                    out_dir / f"shape_model_{kind}.json", model.to_json()
                )
                state["files"][f"shape_model_{kind}"] = str(path)
            return models

        try:
            state["models"] = await asyncio.to_thread(_fit)
        except (CasusError, ValueError) as e:
            logger.error(f"Shape model fitting failed: {e}")
            state["error"] = f"Fitting error: {e}"
        return state

    @traceable(name="propagate")
    async def _propagate(self, state: RunState) -> RunState:
        files = state["files"]
        epistemic = sorted(name for name in files if name.startswith("predictions_e"))
        settings = state["sampling"]
        models = state["models"]

        def _run() -> List[ReportRow]:
            first = read_predictions(files["predictions"])
            others = [read_predictions(files[name]) for name in epistemic]
            modes = {"aleatoric": [first]}
            if others:
                modes["combined"] = ([first] + others)[: state["t_epistemic"]]
            rows: List[ReportRow] = []
            for metric in state["metrics"]:
                for mode, sets in modes.items():
                    cases = build_metric_cases(MetricKind(metric), sets)
                    rows.extend(
                        propagate_cases(
                            cases,
                            state["seed"],
                            settings,
                            models["single"],
                            models["joint"],
                            state["threads"],
                            mode,
                        )
                    )
            return rows

        try:
            rows = await asyncio.to_thread(_run)
            state["rows"] = rows
            path = Path(state["out_dir"]) / "propagation.jsonl"
            files["propagation"] = str(atomic_write_text(path, to_jsonl(rows)))
        except (CasusError, ValueError) as e:
            logger.error(f"Propagation failed: {e}")
            state["error"] = f"Propagation error: {e}"
        return state

    @traceable(name="evaluate")
    async def _evaluate(self, state: RunState) -> RunState:
        files = state["files"]
        settings = state["sampling"]

        def _run() -> Evaluation:
            truths = read_contours(files["truth"])
            evaluation = evaluate_rows(
                state["rows"],
                truths,
                state["bins"],
                config.calibration.uce_use_variance,
                config.calibration.uce_scale,
                settings.n_disks,
                settings.long_axis,
            )
            seg_report, seg_bins = evaluate_segmentation(
                read_predictions(files["predictions"]),
                truths,
                state["seed"],
                settings,
                state["models"]["single"],
                raster_size=state["raster_size"],
                bins=state["bins"],
            )
            evaluation.reports["segmentation"] = seg_report
            evaluation.reliability["ece_segmentation"] = seg_bins
            for path in write_evaluation(evaluation, Path(state["out_dir"])):
                files[path.stem] = str(path)
            return evaluation

        try:
            evaluation = await asyncio.to_thread(_run)
            state["report"] = evaluation.to_dict()
        except (CasusError, ValueError) as e:
            logger.error(f"Evaluation failed: {e}")
            state["error"] = f"Evaluation error: {e}"
        return state

    async def _handle_error(self, state: RunState) -> RunState:
        error_msg = state.get("error") or "Unknown error occurred"
        logger.error(f"Handling error: {error_msg}")
        state["report"] = {}
        return state

    # --- Graph Conditional Edges ---

    def _should_continue(self, state: RunState) -> str:
        return "error" if state.get("error") else "continue"

    # --- Main Public Methods ---

    @traceable(name="casus_pipeline")
    async def run(
        self,
        synth_config: SynthConfig,
        out_dir: Path,
        seed: int = 0,
        threads: int = 1,
        sampling: Optional[SamplingSettings] = None,
        t_epistemic: int = 10,
        metrics: Optional[List[str]] = None,
        bins: int = 10,
        raster_size: int = 64,
    ) -> Dict[str, Any]:
        """Run every stage; the result carries the report, output files and error."""
        initial_state = RunState(
            synth_config=synth_config,
            out_dir=str(out_dir),
            seed=seed,
            threads=threads,
            sampling=sampling or SamplingSettings(),
            t_epistemic=t_epistemic,
            metrics=list(metrics or ALL_METRICS),
            bins=bins,
            raster_size=raster_size,
            files={},
            models={},
            rows=[],
            report={},
            metadata={},
            error=None,
        )
        result = await self.graph.ainvoke(initial_state)

        result["metadata"] = {
            "n_rows": len(result.get("rows", [])),
            "n_rejected": sum(r.rejected for r in result.get("rows", [])),
            "metrics": result.get("metrics"),
        }
        return {
            "report": result["report"],
            "files": result["files"],
            "metadata": result["metadata"],
            "error": result.get("error"),
            "success": not bool(result.get("error")),
        }
