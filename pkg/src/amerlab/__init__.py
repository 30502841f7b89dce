"""Multi-embedding autoregressive retrieval on synthetic vector data."""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

from amerlab.kernels import BACKEND  # noqa: E402

__all__ = ["BACKEND", "__version__"]
