"""Vision-transformer feature extraction into the GEALFD01 dump format."""

from .extract import extract, list_images, preprocess
from .model import ExtractorConfig, forward_features, load_model

__version__ = "0.1.0"

__all__ = [
    "ExtractorConfig",
    "extract",
    "forward_features",
    "list_images",
    "load_model",
    "preprocess",
]
