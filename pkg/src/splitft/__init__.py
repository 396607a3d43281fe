"""Deterministic desk-scale federated split-learning engine with LoRA adapters."""

from .config import ExperimentConfig
from .errors import SplitFTError
from .protocol import RunResult, run_training

__version__ = "0.1.0"

__all__ = ["ExperimentConfig", "RunResult", "SplitFTError", "run_training", "__version__"]
