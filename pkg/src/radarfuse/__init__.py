"""Radar-camera object detection on synthetic water scenes with physics-informed radar encoding,
query-level fusion and temporal query aggregation."""

from .model import FusionDetector, ModelConfig, run_window
from .scene_sim import SimConfig, generate_sequence, read_dataset, write_dataset

__all__ = ["FusionDetector", "ModelConfig", "SimConfig", "generate_sequence", "read_dataset", "run_window",
           "write_dataset"]
__version__ = "0.1.0"
