"""Wire-protocol bridge serving torch vision encoders to remote attack engines."""

from .models import ModelLoadError, ServedModel, load_model, load_snapshot
from .server import BridgeServer, serve_stdio

__all__ = [
    "BridgeServer",
    "ModelLoadError",
    "ServedModel",
    "load_model",
    "load_snapshot",
    "serve_stdio",
]

__version__ = "0.1.0"
