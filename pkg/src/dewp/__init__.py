"""Hourly wind power forecaster built from stacked Fourier-basis expansion blocks."""

__version__ = "0.1.0"
