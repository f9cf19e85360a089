"""HTTP shim serving a local causal LM over the collaborative-decoding wire protocol."""

from .backend import LOG_ZERO, BackendError, ModelBackend, ServedModelSpec
from .server import create_app

__version__ = "0.1.0"

__all__ = [
    "LOG_ZERO",
    "BackendError",
    "ModelBackend",
    "ServedModelSpec",
    "create_app",
    "__version__",
]
