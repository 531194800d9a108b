"""Separable exponential space-time correlation and its information transform.

All information values are in nats (natural logarithm). The log base is a
uniform scale factor on every value the schedulers compare, so it can never
flip an argmax/argmin decision; nats are used for analytic convenience.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


class SingularCorrelationError(ValueError):
    """Correlation of 1 carries infinite information (coincident fresh sample)."""


@dataclass(frozen=True)
class CorrelationParams:
    """Decay rates of the separable correlation exp(-lambda_d*d - lambda_t*t).

    lambda_d: spatial decay rate (1/length)
    lambda_t: temporal decay rate (1/time)
    dt: decision interval; node ages are counted in units of dt
    """

    lambda_d: float
    lambda_t: float
    dt: float = 1.0

    def __post_init__(self) -> None:
        for name in ("lambda_d", "lambda_t", "dt"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be positive and finite, got {value!r}")

    @property
    def slot_distance(self) -> float:
        """Spatial distance worth one decision interval of aging: (lambda_t/lambda_d)*dt."""
        return self.lambda_t / self.lambda_d * self.dt


def rho(d: float, t: float, params: CorrelationParams) -> float:
    """Correlation between samples separated by distance d and time difference t."""
    if d < 0 or t < 0:
        raise ValueError(f"distance and time difference must be nonnegative, got ({d}, {t})")
    return math.exp(-params.lambda_d * d - params.lambda_t * t)


def point_mutual_info(r: float) -> float:
    """Mutual information (nats) between jointly Gaussian samples at correlation r.

    Raises SingularCorrelationError for r >= 1 instead of clamping: a
    correlation of 1 means a coincident fresh sample, a degeneracy callers
    must handle explicitly.
    """
    if r < 0:
        raise ValueError(f"correlation must be nonnegative, got {r}")
    if r >= 1:
        raise SingularCorrelationError("correlation >= 1 implies infinite information")
    return -0.5 * math.log1p(-r * r)
