"""Lipschitz-stable recurrent video super-resolution on a small numpy autodiff core."""

import os as _os

# LIPVSR_NUM_THREADS caps every thread pool; it must be applied before numpy
# loads its BLAS, so it lives here rather than in the CLI.
_threads = _os.environ.get("LIPVSR_NUM_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from .diffops import Kernel, Tensor, backward, no_grad  # noqa: E402
from .errors import (  # noqa: E402
    ConfigError,
    DomainError,
    FormatError,
    LipvsrError,
    ShapeError,
    TrainingDiverged,
    UsageError,
)
from .lipschitz import SrnlConfig, certify_network, spectral_norm, srnl_normalize  # noqa: E402
from .models import NetworkSpec, build, export_checkpoint, import_checkpoint, run_sequence  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DomainError",
    "FormatError",
    "Kernel",
    "LipvsrError",
    "NetworkSpec",
    "ShapeError",
    "SrnlConfig",
    "Tensor",
    "TrainingDiverged",
    "UsageError",
    "backward",
    "build",
    "certify_network",
    "export_checkpoint",
    "import_checkpoint",
    "no_grad",
    "run_sequence",
    "spectral_norm",
    "srnl_normalize",
]
