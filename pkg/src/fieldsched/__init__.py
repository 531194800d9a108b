"""Sensor activation scheduling on spatio-temporally correlated fields."""

from ._kernels import BACKEND as KERNEL_BACKEND
from .correlation import CorrelationParams, point_mutual_info, rho
from .infofield import (EXPIRED, AoIState, GainResult, Layout,
                        QuadratureConfig, total_gain, total_gains,
                        validate_plane_integral)

__version__ = "0.1.0"

__all__ = [
    "KERNEL_BACKEND", "CorrelationParams", "point_mutual_info", "rho",
    "EXPIRED", "AoIState", "GainResult", "Layout", "QuadratureConfig",
    "total_gain", "total_gains", "validate_plane_integral", "__version__",
]
