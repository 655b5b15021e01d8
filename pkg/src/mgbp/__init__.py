"""Multi-grid back-projection super-resolution on a small numpy autograd.

``MGBP_THREADS`` caps the BLAS/OpenMP worker threads; it must be set before
the first import of this package.
"""
import os as _os

_threads = _os.environ.get("MGBP_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from .graph import MgbpConfig, NetworkGraph, build, forward, paper_config, trace_shapes  # noqa: E402
from .kernels import BACKEND  # noqa: E402
from .perceptual import LossWeights, VnscConfig  # noqa: E402
from .trainer import TrainConfig  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "LossWeights",
    "MgbpConfig",
    "NetworkGraph",
    "TrainConfig",
    "VnscConfig",
    "build",
    "forward",
    "paper_config",
    "trace_shapes",
]
