"""Embedding sidecar: image directory -> unit-vector index JSONL."""

from .builder import SidecarConfig, SidecarError, build_index
from .encoders import EncoderError, get_encoder

__version__ = "0.1.0"

__all__ = ["SidecarConfig", "SidecarError", "build_index", "EncoderError",
           "get_encoder", "__version__"]
