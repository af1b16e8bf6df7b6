"""Cohort-based score normalization and demographic fairness evaluation."""

__version__ = "0.1.0"
