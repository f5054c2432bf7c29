"""Tests for the LangGraph end-to-end pipeline."""

import sys
from pathlib import Path

import pytest

# Add src to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from casus.experiments import SamplingSettings
from casus.pipeline import ALL_METRICS, CasusPipeline
from casus.synth import PresetManager


@pytest.fixture
def quick_config():
    return PresetManager().get_synth_config("quick")


@pytest.fixture
def pipeline():
    return CasusPipeline()


async def test_pipeline_runs_all_stages(pipeline, quick_config, tmp_path):
    """Test a full run produces reports, models and files."""
    result = await pipeline.run(
        quick_config,
        tmp_path,
        seed=1,
        sampling=SamplingSettings(t_aleatoric=4),
        t_epistemic=2,
        bins=4,
        raster_size=24,
    )
    assert result["success"], result["error"]
    report = result["report"]
    assert "aleatoric/area" in report
    assert "combined/ef" in report
    assert "segmentation" in report
    files = result["files"]
    for name in ("shape_model_single", "shape_model_joint", "propagation", "report"):
        assert Path(files[name]).is_file()
    assert result["metadata"]["metrics"] == ALL_METRICS
    assert result["metadata"]["n_rows"] > 0


async def test_pipeline_rejects_unknown_metric(pipeline, quick_config, tmp_path):
    result = await pipeline.run(quick_config, tmp_path, metrics=["area", "mass"])
    assert not result["success"]
    assert "Unknown metrics" in result["error"]
    assert result["report"] == {}
    assert not (tmp_path / "contours.jsonl").exists()


@pytest.mark.parametrize(
    "kwargs",
    [
        {"bins": 0},
        {"threads": 0},
        {"t_epistemic": 0},
        {"sampling": SamplingSettings(epsilon2=0.0)},
    ],
)
async def test_pipeline_validates_settings(pipeline, quick_config, tmp_path, kwargs):
    result = await pipeline.run(quick_config, tmp_path, **kwargs)
    assert not result["success"]


async def test_pipeline_temporal_fac(pipeline, quick_config, tmp_path):
    """Test a temporal run through the joint ED/ES model."""
    result = await pipeline.run(
        quick_config,
        tmp_path,
        sampling=SamplingSettings(t_aleatoric=4, temporal=True),
        t_epistemic=1,
        metrics=["fac"],
        bins=4,
        raster_size=24,
    )
    assert result["success"], result["error"]
    assert "aleatoric/fac" in result["report"]
    assert "combined/fac" in result["report"]


async def test_pipeline_routes_value_errors_to_handler(pipeline, quick_config, tmp_path):
    """Test a ValueError inside a stage ends in the error node, not an exception."""
    result = await pipeline.run(
        quick_config,
        tmp_path,
        sampling=SamplingSettings(t_aleatoric=2),
        t_epistemic=1,
        metrics=["area"],
        bins=2,
        raster_size=4,
    )
    assert not result["success"]
    assert result["error"].startswith("Evaluation error")
    assert result["report"] == {}
    assert Path(result["files"]["propagation"]).is_file()
