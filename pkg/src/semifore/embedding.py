"""Time-delay embedding of parameter series.

Rows are newest-first: the embedded point at source index i is
(theta_i, theta_{i-1}, ..., theta_{i-L}). After any nonparametric
operation, the physical parameter fed back into the dynamical model is
the first ``source_dim`` coordinates of an embedded point.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InsufficientDataError
from .models import TimeSeries


@dataclass
class DelayConfig:
    lags: int
    source_dim: int

    def __post_init__(self):
        if self.lags < 0:
            raise ValueError("lag count must be nonnegative")
        if self.source_dim < 1:
            raise ValueError("source dimension must be positive")

    @property
    def embedded_dim(self) -> int:
        return self.source_dim * (self.lags + 1)


def delay_embed(series: TimeSeries, lags: int) -> TimeSeries:
    """Embed an m-dimensional series into m*(lags+1) dimensions.

    The output keeps the sample interval and drops the first ``lags``
    samples; column block k holds the series delayed by k steps.
    """
    vals = series.values
    n, m = vals.shape
    if lags < 0:
        raise ValueError("lag count must be nonnegative")
    if n <= lags:
        raise InsufficientDataError(f"need more than {lags} samples, got {n}")
    cols = [vals[lags - k: n - k] for k in range(lags + 1)]
    return TimeSeries(values=np.hstack(cols), dt=series.dt, t0=series.t0 + lags * series.dt)


def physical_coords(points: np.ndarray, source_dim: int) -> np.ndarray:
    """First source_dim coordinates of embedded points (the current value)."""
    pts = np.asarray(points)
    return pts[..., :source_dim]
