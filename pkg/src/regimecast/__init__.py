"""Toolkit for labeling winter circulation regimes from gridded anomalies,
forecasting them with deformable-convolution classifiers, verifying the
forecasts, and attributing predictions to grid points."""

__version__ = "0.1.0"
