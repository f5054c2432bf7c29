"""Contour aleatoric and shape uncertainty sampling (CASUS) package."""

__version__ = "0.1.0"
__author__ = "CASUS Team"
__description__ = (
    "Contour uncertainty sampling and Monte-Carlo propagation to clinical metrics"
)
