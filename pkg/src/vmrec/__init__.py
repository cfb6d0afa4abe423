"""Cross-modal music/video embedding training and Recall@k evaluation."""

from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
