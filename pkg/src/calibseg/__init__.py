"""Calibration losses with neighbourhood logit constraints, plus segmentation
calibration metrics and rank aggregation."""

__version__ = "0.1.0"
