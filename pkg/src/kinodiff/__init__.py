"""Kinematics-regularized diffusion for trajectory anomaly detection."""

__version__ = "0.1.0"
