"""Spline-based neural density regression with blended GP tails.

The numerical kernels come from a compiled extension when it is available and
from a pure-Python implementation otherwise (or when ``SPQRX_PURE_PYTHON=1``);
``spqrx.BACKEND`` names the one in use.
"""

from ._backend import NAME as BACKEND
from .distributions import BlendSpec, GPParams
from .io import ConfigError, DataError, load_config, load_model, save_model
from .network import XiActivation
from .regression import (Architecture, Dataset, FittedModel, TrainingConfig, TrainingError,
                         fit_spqr, fit_spqrx, grid_search)
from .splines import SplineBasis, build_basis

__all__ = ["BACKEND", "BlendSpec", "GPParams", "ConfigError", "DataError", "load_config",
           "load_model", "save_model", "XiActivation", "Architecture", "Dataset",
           "FittedModel", "TrainingConfig", "TrainingError", "fit_spqr", "fit_spqrx",
           "grid_search", "SplineBasis", "build_basis"]

__version__ = "0.1.0"
