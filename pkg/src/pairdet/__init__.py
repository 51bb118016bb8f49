"""Video object detection with a single adjacent reference frame."""

from .config import PipelineConfig, load_config
from .detection_core import CenterPointDetector, Detection
from .pipeline import PairDetector, build_model, infer_video, train

__version__ = "0.1.0"

__all__ = [
    "CenterPointDetector",
    "Detection",
    "PairDetector",
    "PipelineConfig",
    "build_model",
    "infer_video",
    "load_config",
    "train",
    "__version__",
]
