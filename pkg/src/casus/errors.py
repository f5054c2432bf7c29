"""Exception types raised across the CASUS modules."""

from typing import Optional


class CasusError(Exception):
    """Base class for all CASUS errors.

    ``code`` is a stable machine-readable identifier; the message is for humans.
    """

    code = "casus_error"

    def __init__(self, message: str, code: Optional[str] = None):
        super().__init__(message)
        if code is not None:
            self.code = code

    @property
    def message(self) -> str:
        return str(self.args[0]) if self.args else ""


class ContourValidationError(CasusError, ValueError):
    code = "invalid_contour"


class HeatmapError(CasusError, ValueError):
    code = "invalid_heatmap"


class HeatmapFileError(CasusError, ValueError):
    """Malformed heatmap tensor file; ``offset`` is the failing byte position."""

    code = "bad_heatmap_file"

    def __init__(self, message: str, offset: int, code: Optional[str] = None):
        super().__init__(f"{message} (at byte offset {offset})", code)
        self.offset = offset


class ShapeModelError(CasusError, ValueError):
    code = "invalid_shape_model"


class ScheduleError(CasusError, ValueError):
    code = "unsupported_schedule"


class FusionError(CasusError, ValueError):
    code = "fusion_failed"


class MetricError(CasusError, ValueError):
    code = "metric_failed"


class PropagationError(CasusError, ValueError):
    code = "propagation_failed"


class CalibrationError(CasusError, ValueError):
    code = "calibration_failed"


class RecordError(CasusError, ValueError):
    """Malformed dataset, prediction or model record."""

    code = "bad_record"
