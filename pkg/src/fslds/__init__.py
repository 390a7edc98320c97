"""Factorial switching linear dynamical system for multi-electrode spike counts."""
from .model import LatentTrajectory, ModelParams, SpikeCountMatrix
from .inference import FitConfig, FitResult, fit_multi, fit_once

__all__ = ["SpikeCountMatrix", "ModelParams", "LatentTrajectory",
           "FitConfig", "FitResult", "fit_once", "fit_multi"]
__version__ = "0.1.0"
