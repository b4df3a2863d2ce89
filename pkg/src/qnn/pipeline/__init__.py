"""Datasets, experiment configuration, orchestration and the CLI."""

from .config import ExperimentConfig
from .data import Dataset, load_dataset
from .experiments import run_full_pipeline, run_slim_sweep, run_width_sweep

__all__ = ["Dataset", "ExperimentConfig", "load_dataset", "run_full_pipeline", "run_slim_sweep", "run_width_sweep"]
