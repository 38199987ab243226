"""Torch backend adapter for the vtnk try-on kernels."""

from .backends import BackendLoadError, TinyLatentBackend, load_backend  # noqa: F401
from .denoiser import TorchDenoiser  # noqa: F401
from .session import AdapterSession, UnknownLayer  # noqa: F401
from .smoke import load_sample, run_shop_to_model  # noqa: F401

__version__ = "0.1.0"
