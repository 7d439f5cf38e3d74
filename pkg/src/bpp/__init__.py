"""Multi-resolution residual image enhancement with back-projection updates."""

import os as _os
import sys as _sys

# BPP_THREADS=1 is the deterministic reference mode: it pins the BLAS thread
# pools so reduction order never varies.  Only effective if numpy has not
# been imported yet, hence this runs before anything else in the package.
_threads = _os.environ.get("BPP_THREADS")
if _threads and "numpy" not in _sys.modules:
    for _var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        _os.environ.setdefault(_var, _threads)

from .network import (  # noqa: E402
    BppConfig,
    BppParams,
    PyramidState,
    build_params,
    flux,
    flux_block,
    forward,
    initialize_pyramid,
    paper_config,
    param_count,
    run_flux_blocks,
)
from .tensor import Tensor, backward  # noqa: E402

__all__ = [
    "BppConfig",
    "BppParams",
    "PyramidState",
    "Tensor",
    "backward",
    "build_params",
    "flux",
    "flux_block",
    "forward",
    "initialize_pyramid",
    "paper_config",
    "param_count",
    "run_flux_blocks",
]
