"""Configuration, checkpoints, experiment commands and the command line."""
from .checkpoint import checkpoint_bytes, load_checkpoint, save_checkpoint
from .config import ExperimentConfig

__all__ = ["ExperimentConfig", "checkpoint_bytes", "load_checkpoint", "save_checkpoint"]
