"""Offline embedding extractor emitting PIAA container files."""

from .encoders import ClipEncoder, ToyEncoder, create_encoder
from .extract import ExtractError, ExtractJob, ExtractResult, extract

__version__ = "0.1.0"

__all__ = [
    "ClipEncoder", "ToyEncoder", "create_encoder",
    "ExtractError", "ExtractJob", "ExtractResult", "extract",
    "__version__",
]
