"""ROSE: Fisher-normalized score gradients for OOD detection with a small VAE."""

from .config import AppConfig
from .pipeline import RosePipeline

__all__ = ["AppConfig", "RosePipeline"]
