"""Configuration management for the CASUS toolkit."""

import os
from typing import Optional

from dotenv import load_dotenv
from pydantic import BaseModel, Field


# Load environment variables from .env file
load_dotenv()


def _env_bool(name: str, default: str = "false") -> bool:
    return os.getenv(name, default).lower() in ("1", "true", "yes")


class SamplingConfig(BaseModel):
    """Configuration for contour sampling and Monte-Carlo propagation."""

    epsilon2: float = Field(
        default_factory=lambda: float(os.getenv("CASUS_EPSILON2", "0.1"))
    )
    t_aleatoric: int = Field(
        default_factory=lambda: int(os.getenv("CASUS_T_ALEATORIC", "25"))
    )
    t_epistemic: int = Field(
        default_factory=lambda: int(os.getenv("CASUS_T_EPISTEMIC", "10"))
    )
    n_disks: int = Field(default_factory=lambda: int(os.getenv("CASUS_N_DISKS", "20")))
    long_axis: str = Field(
        default_factory=lambda: os.getenv("CASUS_LONG_AXIS", "max")
    )


class CalibrationConfig(BaseModel):
    """Configuration for calibration evaluation."""

    bins: int = Field(default_factory=lambda: int(os.getenv("CASUS_BINS", "10")))
    mi_bins: int = Field(default_factory=lambda: int(os.getenv("CASUS_MI_BINS", "10")))
    uce_use_variance: bool = Field(
        default_factory=lambda: _env_bool("CASUS_UCE_USE_VARIANCE")
    )
    uce_scale: str = Field(
        default_factory=lambda: os.getenv("CASUS_UCE_SCALE", "expected-abs")
    )


class RuntimeConfig(BaseModel):
    """Configuration for command execution."""

    threads: int = Field(
        default_factory=lambda: int(
            os.getenv("CASUS_THREADS", str(os.cpu_count() or 1))
        )
    )
    seed: int = Field(default_factory=lambda: int(os.getenv("CASUS_SEED", "0")))
    log_level: str = Field(default_factory=lambda: os.getenv("LOG_LEVEL", "INFO"))
    raster_size: int = Field(
        default_factory=lambda: int(os.getenv("CASUS_RASTER_SIZE", "128"))
    )


class LangSmithConfig(BaseModel):
    """Configuration for LangSmith tracing of pipeline stages."""

    tracing_enabled: bool = Field(
        default_factory=lambda: _env_bool("LANGCHAIN_TRACING_V2")
    )
    endpoint: str = Field(
        default_factory=lambda: os.getenv(
            "LANGCHAIN_ENDPOINT", "https://api.smith.langchain.com"
        )
    )
    api_key: str = Field(default_factory=lambda: os.getenv("LANGCHAIN_API_KEY", ""))
    project: str = Field(
        default_factory=lambda: os.getenv("LANGCHAIN_PROJECT", "casus")
    )


class Config:
    """Main configuration class."""

    def __init__(self):
        self.sampling = SamplingConfig()
        self.calibration = CalibrationConfig()
        self.runtime = RuntimeConfig()
        self.langsmith = LangSmithConfig()

    @classmethod
    def from_env(cls) -> "Config":
        """Create configuration from environment variables."""
        return cls()

    def threads_override(self) -> Optional[int]:
        """Thread count forced through CASUS_THREADS, if set."""
        value = os.getenv("CASUS_THREADS")
        return int(value) if value else None


# Global configuration instance
config = Config.from_env()
