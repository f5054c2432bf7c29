"""Synthetic left-ventricle populations with known prediction-noise covariances.

Shapes are a half-ellipse with a flat basal chord plus smooth Gaussian
perturbations correlated along arc length. ES shapes contract the ED shape
toward the basal midpoint. Predictions add independent, heteroscedastic
per-point noise whose covariance is reported exactly as Σ̂, so calibration of
downstream uncertainty has an analytic target.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, ValidationError, field_validator

from .errors import RecordError
from .geometry import Contour, Frame, View, contour_from_polyline
from .heatmap import ContourDistribution
from .numerics import psd_sqrt
from .sampler import RandomStream, frame_tag, stream_key, view_tag


logger = logging.getLogger(__name__)

DENSE_POINTS = 2001


class SynthConfig(BaseModel):
    """Configuration for a synthetic population and its predictions."""

    n_cases: int = Field(default=200, ge=1)
    n_population: int = Field(default=500, ge=2)
    k: int = 21
    seed: int = Field(default=0, ge=0)

    # Base shape, normalized coordinates
    half_width: float = Field(default=0.35, gt=0)
    length: float = Field(default=0.8, gt=0)
    basal_y: float = 0.4
    a2c_width_ratio: float = Field(default=0.9, gt=0)

    # Population variability
    shape_noise: float = Field(default=0.03, ge=0)
    length_scale: float = Field(default=0.2, gt=0)
    contraction: float = Field(default=0.75, gt=0)
    ed_es_coupling: float = Field(default=0.9, ge=0, le=1)
    es_noise: float = Field(default=0.005, ge=0)

    # Prediction noise
    prediction_noise: float = Field(default=0.02, ge=0)
    noise_spread: float = Field(default=0.5, ge=0)
    anisotropy: float = Field(default=0.5, ge=0, lt=1)
    n_epistemic: int = Field(default=0, ge=0)
    epistemic_noise: float = Field(default=0.01, ge=0)

    spacing_mm: float = Field(default=75.0, gt=0)

    @field_validator("k")
    @classmethod
    def _odd_k(cls, v: int) -> int:
        if v < 5 or v % 2 == 0:
            raise ValueError(f"k must be odd and >= 5, got {v}")
        return v


@dataclass
class SynthPredictions:
    """Predictions for a set of ground-truth images, plus optional epistemic sets."""

    truths: List[Contour]
    predictions: List[ContourDistribution]
    epistemic: List[List[ContourDistribution]] = field(default_factory=list)


# --- Presets ---


class PresetManager:
    """Named synthetic configurations from a JSON file."""

    def __init__(self, presets_file: Optional[Union[str, Path]] = None):
        if presets_file is None:
            presets_file = Path(__file__).parent / "presets.json"
        self.presets_file = Path(presets_file)
        self.config = self._load_presets()

    def _load_presets(self) -> Dict[str, Any]:
        try:
            with open(self.presets_file, encoding="utf-8") as f:
                presets = json.load(f)
            logger.debug(f"Loaded presets from {self.presets_file}")
            return presets
        except FileNotFoundError:
            logger.error(f"Presets file not found: {self.presets_file}")
            raise
        except json.JSONDecodeError as e:
            logger.error(f"Invalid JSON in presets file: {e}")
            raise

    def list_presets(self) -> List[str]:
        return list(self.config["presets"].keys())

    def get_default_preset(self) -> str:
        for name, preset in self.config["presets"].items():
            if preset.get("default", False):
                return name
        return "default"

    def _preset(self, name: str) -> Dict[str, Any]:
        preset = self.config["presets"].get(name)
        if preset is None:
            raise ValueError(
                f"Preset '{name}' not found; available: {', '.join(self.list_presets())}"
            )
        return preset

    def get_description(self, name: str) -> str:
        return self._preset(name).get("description", "")

    def get_synth_config(self, name: str, **overrides: Any) -> SynthConfig:
        return SynthConfig(**{**self._preset(name).get("synth", {}), **overrides})

    def get_sampling_overrides(self, name: str) -> Dict[str, Any]:
        """Sampling settings (epsilon2, t_aleatoric, ...) recommended for a preset."""
        return dict(self._preset(name).get("sampling", {}))


def load_synth_config(source: Optional[str] = None) -> SynthConfig:
    """Config from a JSON file path, a preset name, or the default preset."""
    manager = PresetManager()
    if source is None:
        return manager.get_synth_config(manager.get_default_preset())
    path = Path(source)
    if path.is_file():
        try:
            return SynthConfig.model_validate_json(path.read_text(encoding="utf-8"))
        except ValidationError as e:
            raise RecordError(f"invalid synth config {path}: {e}", "bad_config") from e
    return manager.get_synth_config(source)


# --- Shapes ---


def base_shape(cfg: SynthConfig, view: View = View.A4C) -> np.ndarray:
    """Half-ellipse basal1 → apex → basal2 with K arc-length-uniform points."""
    width = cfg.half_width * (cfg.a2c_width_ratio if View(view) is View.A2C else 1.0)
    theta = np.linspace(0.0, np.pi, DENSE_POINTS)
    dense = np.column_stack(
        [-width * np.cos(theta), cfg.basal_y - cfg.length * np.sin(theta)]
    )
    points, _ = contour_from_polyline(dense, DENSE_POINTS // 2, cfg.k)
    return points


def arc_kernel(cfg: SynthConfig) -> np.ndarray:
    """Squared-exponential correlation over normalized arc length."""
    s = np.linspace(0.0, 1.0, cfg.k)
    d = s[:, None] - s[None, :]
    return np.exp(-0.5 * (d / cfg.length_scale) ** 2)


def population_covariance(
    cfg: SynthConfig, kind: str = "single", frame: Frame = Frame.ED
) -> np.ndarray:
    """Generator covariance of interleaved shape vectors.

    ``single`` gives the ED or ES covariance; ``joint`` the 4K covariance of
    concatenated (ED, ES) vectors.
    """
    p = cfg.shape_noise**2 * np.kron(arc_kernel(cfg), np.eye(2))
    c, kappa = cfg.contraction, cfg.ed_es_coupling
    es = c**2 * p + cfg.es_noise**2 * np.eye(p.shape[0])
    if kind == "single":
        return p if Frame(frame) is Frame.ED else es
    cross = c * kappa * p
    return np.block([[p, cross], [cross.T, es]])


def _smooth_noise(
    gen: np.random.Generator, chol: np.ndarray, scale: float
) -> np.ndarray:
    return scale * chol @ gen.standard_normal((chol.shape[0], 2))


def generate_population(cfg: SynthConfig, split: str = "train") -> List[Contour]:
    """ED and ES contours in both apical views for every case of ``split``.

    The training split has ``n_population`` cases, any other split ``n_cases``.
    """
    n = cfg.n_population if split == "train" else cfg.n_cases
    root = RandomStream(cfg.seed).child(stream_key(split))
    chol = psd_sqrt(arc_kernel(cfg))
    spacing = (cfg.spacing_mm, cfg.spacing_mm)
    c, kappa = cfg.contraction, cfg.ed_es_coupling
    contours: List[Contour] = []
    for i in range(n):
        case_id = f"{split}-{i:04d}"
        for view in (View.A4C, View.A2C):
            gen = root.child(i, view_tag(view)).generator()
            base = base_shape(cfg, view)
            anchor = 0.5 * (base[0] + base[-1])
            p = _smooth_noise(gen, chol, cfg.shape_noise)
            p_indep = _smooth_noise(gen, chol, cfg.shape_noise)
            e = cfg.es_noise * gen.standard_normal(base.shape)
            ed = base + p
            es = (
                anchor
                + c * (base - anchor)
                + c * (kappa * p + np.sqrt(1.0 - kappa**2) * p_indep)
                + e
            )
            landmarks = (0, (cfg.k - 1) // 2, cfg.k - 1)
            for frame, pts in ((Frame.ED, ed), (Frame.ES, es)):
                contours.append(
                    Contour(pts, landmarks, spacing, view, frame, case_id)
                )
    logger.info("Generated %d %s contours", len(contours), split)
    return contours


# --- Predictions ---


def _point_covariances(
    gen: np.random.Generator, k: int, sigma: float, anisotropy: float
) -> Tuple[np.ndarray, np.ndarray]:
    """Per-point noise factors R·diag(σ, rσ) and covariances R·diag(σ², r²σ²)·Rᵀ."""
    theta = gen.uniform(0.0, np.pi, k)
    ratio = 1.0 - anisotropy * gen.uniform(0.0, 1.0, k)
    cos, sin = np.cos(theta), np.sin(theta)
    rot = np.stack([np.stack([cos, -sin], -1), np.stack([sin, cos], -1)], -2)
    scales = np.stack([np.full(k, sigma), ratio * sigma], -1)
    factors = rot * scales[:, None, :]
    return factors, factors @ np.swapaxes(factors, -1, -2)


def case_noise_scale(cfg: SynthConfig, case_id: str) -> float:
    """Per-case noise standard deviation, log-uniform around prediction_noise."""
    gen = RandomStream(cfg.seed).child(stream_key("scale"), stream_key(case_id)).generator()
    return cfg.prediction_noise * float(np.exp(cfg.noise_spread * gen.uniform(-1.0, 1.0)))


def generate_predictions(truths: List[Contour], cfg: SynthConfig) -> SynthPredictions:
    """μ̂ = s + bias with bias ~ N(0, Σ̂) per point, Σ̂ reported exactly."""
    root = RandomStream(cfg.seed).child(stream_key("predict"))
    chol = psd_sqrt(arc_kernel(cfg))
    predictions: List[ContourDistribution] = []
    epistemic: List[List[ContourDistribution]] = [[] for _ in range(cfg.n_epistemic)]
    for truth in truths:
        path = (stream_key(truth.case_id), view_tag(truth.view), frame_tag(truth.frame))
        gen = root.child(*path).generator()
        factors, covs = _point_covariances(
            gen, truth.k, case_noise_scale(cfg, truth.case_id), cfg.anisotropy
        )
        bias = np.einsum("kij,kj->ki", factors, gen.standard_normal((truth.k, 2)))
        dist = ContourDistribution(
            means=truth.points + bias,
            covariances=covs,
            landmarks=truth.landmarks,
            view=truth.view,
            frame=truth.frame,
            case_id=truth.case_id,
            spacing_mm=truth.spacing_mm,
        )
        predictions.append(dist)
        for e in range(cfg.n_epistemic):
            egen = root.child(stream_key("epistemic"), e, *path).generator()
            shift = _smooth_noise(egen, chol, cfg.epistemic_noise)
            epistemic[e].append(dist.replace(dist.means + shift, dist.covariances))
    return SynthPredictions(truths=list(truths), predictions=predictions, epistemic=epistemic)
