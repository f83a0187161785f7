"""Trajectory and localization-error metrics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import EmptyVector
from .numeric import frobenius_diff


@dataclass(frozen=True)
class ErrorStats:
    mean_m: float
    worst_m: float
    best_m: float
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def trajectory_norm(w_prev, w_next) -> float:
    """Norm of the change between consecutive GM states."""
    return frobenius_diff(w_prev, w_next)


def error_stats(errors) -> ErrorStats:
    e = np.asarray(list(errors), dtype=np.float64)
    if e.size == 0:
        raise EmptyVector("error_stats needs at least one error")
    if np.any(e < 0):
        raise ValueError("localization errors are distances and must be >= 0")
    return ErrorStats(float(np.mean(e)), float(np.max(e)), float(np.min(e)), int(e.size))


def _ratio(num: float, den: float) -> float:
    if den == 0.0:
        return math.inf
    return num / den


def improvement_ratio(baseline: ErrorStats, candidate: ErrorStats) -> tuple[float, float]:
    """(baseline mean / candidate mean, baseline worst / candidate worst).

    A candidate error of exactly zero yields ``math.inf``.
    """
    return _ratio(baseline.mean_m, candidate.mean_m), _ratio(baseline.worst_m, candidate.worst_m)


def coefficient_of_variation(series) -> float:
    s = np.asarray(series, dtype=np.float64)
    m = float(np.mean(s))
    return math.inf if m == 0 else float(np.std(s)) / m
