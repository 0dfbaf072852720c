"""Personalised fall detection: angle-based outlier detection on raw
accelerometer windows, an SVM baseline, and the evaluation protocols."""

__version__ = "0.1.0"
